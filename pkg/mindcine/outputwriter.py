import csv
import json
import logging

logger = logging.getLogger(__name__)


class OutputWriterBase:
    def __init__(self, outfile, header=None, labels=None, **kwargs):
        self._outfile = outfile
        self._labels = labels or {}
        self._prev_keys = None
        if header:
            self.write_row(header)

    def close(self):
        pass

    def write_row(self, vals):
        pass

    def write_kv(self, d):
        pass

    def _did_keys_change(self, keys):
        """ side effect: new keys stored """
        keys = list(keys)
        changed = self._prev_keys != keys
        self._prev_keys = keys
        return changed

    def label(self, k):
        return self._labels.get(k, k)

    def write_header(self, keys):
        """ column labels now, even if no record follows """
        self._prev_keys = list(keys)
        self.write_row([self.label(k) for k in keys])

    def write_record(self, keys, vals):
        """ one table row, the column header first whenever the key set changes """
        if self._did_keys_change(keys):
            self.write_row([self.label(k) for k in keys])
        self.write_row(vals)


class OutputWriterTxt(OutputWriterBase):
    def __init__(self, outfile, header=None, colwidth=None, colwidths=(), formats=None, **kwargs):
        if colwidth and colwidths:
            raise ValueError("colwidth or colwidths, not both")

        self._colwidth = colwidth
        self._colwidths = list(colwidths)
        self._formats = formats or {}

        super().__init__(outfile, header, **kwargs)

    def _col_pad(self, i, s):
        """ column space padding """
        s = str(s)
        if self._colwidth:
            n = self._colwidth
        elif i < len(self._colwidths):
            n = self._colwidths[i]
        else:
            n = 1

        return s.ljust(n)

    def write_row(self, vals):
        a = [self._col_pad(i, v) for i, v in enumerate(vals)]
        print(*a, sep=" ", file=self._outfile)

    def write_kv(self, d):
        if not d:
            return
        klen = max(len(str(k)) for k in d) + 1
        for k, v in d.items():
            ks = "{}:".format(k).ljust(klen)
            print("   ", ks, v, file=self._outfile)

    def write_record(self, keys, vals):
        """ pretty columnized text, values through per-key format strings """
        assert len(keys) == len(vals)
        svals = [self._formats[k].format(v) if k in self._formats and v is not None else str(v) for k, v in zip(keys, vals)]
        super().write_record(keys, svals)


class OutputWriterJson(OutputWriterBase):
    def __init__(self, outfile, header=None, **kwargs):
        super().__init__(outfile, header, **kwargs)

    def _write_obj(self, obj):
        json.dump(obj, fp=self._outfile, sort_keys=True)
        print("\n", end="", file=self._outfile)

    def write_row(self, vals):
        self._write_obj(list(vals))

    def write_kv(self, d):
        self._write_obj(d)

    def write_header(self, keys):
        self._prev_keys = list(keys)

    def write_record(self, keys, vals):
        self._write_obj(dict(zip(keys, vals)))


class OutputWriterCsv(OutputWriterBase):
    def __init__(self, outfile, header=None, **kwargs):
        self._csvw = csv.writer(outfile, lineterminator="\n")
        super().__init__(outfile, header, **kwargs)

    def write_row(self, vals):
        self._csvw.writerow(vals)

    def write_kv(self, d):
        self.write_row(d.keys())
        self.write_row(d.values())


class OutputWriterDummy(OutputWriterBase):
    def __init__(self, outfile, header=None, **kwargs):
        super().__init__(outfile, header)


def mk_OutputWriter(outfile=None, fmt=None, **kwargs):
    if outfile is None:
        return OutputWriterDummy(outfile, **kwargs)

    if fmt == "txt":
        return OutputWriterTxt(outfile, **kwargs)

    elif fmt == "csv":
        return OutputWriterCsv(outfile, **kwargs)

    elif fmt == "json":
        return OutputWriterJson(outfile, **kwargs)

    else:
        raise ValueError("Unknown fmt format '{}'".format(fmt))
