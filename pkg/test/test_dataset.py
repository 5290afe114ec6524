import dataclasses
import json
import os

import numpy as np
import pytest

import utils
from mindcine.config import from_dict, validate
from mindcine.dataset import (
    EegSegment,
    as_arrays,
    generate_synthetic,
    least_squares_readout,
    load_manifest,
    save_manifest,
    slice_windows,
    validate_manifest,
    window_stride,
)
from mindcine.defs import ConfigError, IngestionError, Split, ValidationError


def test_layout(tiny_manifest):
    m = tiny_manifest
    assert len(m.records) == 30
    assert len(m.train) == 20
    assert len(m.test) == 10
    assert {r.block_id for r in m.test} == {3}
    assert m.split[3] is Split.TEST
    counts = np.bincount([r.concept_label for r in m.test], minlength=5)
    assert counts.tolist() == [2] * 5
    assert [r.clip_id for r in m.records] == sorted(r.clip_id for r in m.records)


def test_generation_is_deterministic(tiny_cfg):
    a = generate_synthetic(tiny_cfg.data, 3)
    b = generate_synthetic(tiny_cfg.data, 3)
    for ra, rb in zip(a.records, b.records):
        assert ra.clip_id == rb.clip_id
        assert np.array_equal(ra.eeg.data, rb.eeg.data)
        assert np.array_equal(ra.gt_latents, rb.gt_latents)
    c = generate_synthetic(tiny_cfg.data, 4)
    assert not np.array_equal(a.records[0].eeg.data, c.records[0].eeg.data)


def test_clips_independent_of_block_count():
    small = validate(from_dict(utils.tiny_dict(data={"blocks": 2, "test_blocks": [2]})))
    big = validate(from_dict(utils.tiny_dict()))
    a = generate_synthetic(small.data, 0).by_id()
    b = generate_synthetic(big.data, 0).by_id()
    assert set(a) < set(b)
    for cid, r in a.items():
        assert np.array_equal(r.eeg.data, b[cid].eeg.data)


def test_slice_windows_tiles_segment(tiny_manifest):
    seg = tiny_manifest.records[0].eeg
    ws = slice_windows(seg, 3, 20)
    assert ws.windows.shape == (3, 4, 20)
    assert ws.stride == 10
    assert ws.offsets == [0, 10, 20]
    for i, off in enumerate(ws.offsets):
        assert np.array_equal(ws.windows[i], seg.data[:, off : off + 20])
    assert ws.offsets[-1] + ws.window_len == seg.samples


def test_single_window():
    assert window_stride(40, 1, 40) == 0
    ws = slice_windows(np.arange(80.0).reshape(2, 40), 1, 40)
    assert ws.windows.shape == (1, 2, 40)


def test_single_window_must_span_segment():
    with pytest.raises(ConfigError, match="closest valid window is 10"):
        slice_windows(EegSegment(np.zeros((2, 10)), 100.0, "x"), 1, 4)
    with pytest.raises(ConfigError, match="closest valid window is 40"):
        validate(from_dict(utils.tiny_dict(data={"frames": 1, "window": 20})))


def test_window_must_tile():
    with pytest.raises(ConfigError, match="closest valid window is"):
        window_stride(40, 3, 21)


def test_segment_rejects_non_finite():
    data = np.zeros((2, 10))
    data[1, 3] = np.nan
    with pytest.raises(ValidationError):
        EegSegment(data, 100.0, "x")


def test_manifest_save_load(tiny_manifest, tmp_path):
    path = str(tmp_path / "manifest")
    save_manifest(tiny_manifest, path)
    m = load_manifest(path)
    assert m.dims == tiny_manifest.dims
    assert m.meta["render_seed"] == tiny_manifest.meta["render_seed"]
    a, b = as_arrays(tiny_manifest.records), as_arrays(m.records)
    assert a["clip_ids"] == b["clip_ids"]
    for k in ("eeg", "latents", "image", "text", "depth", "cond", "labels"):
        assert np.array_equal(a[k], b[k])


def test_truncated_array_is_reported(tiny_manifest, tmp_path):
    path = str(tmp_path / "manifest")
    save_manifest(tiny_manifest, path)
    cid = tiny_manifest.records[0].clip_id
    f = os.path.join(path, "arrays", cid, "eeg.f32")
    with open(f, "r+b") as fh:
        fh.truncate(os.path.getsize(f) - 4)
    with pytest.raises(IngestionError, match=cid):
        load_manifest(path)


def test_noise_free_eeg_is_linearly_decodable(tiny_manifest):
    assert least_squares_readout(tiny_manifest.train, tiny_manifest.dims.concepts) >= 0.99


def test_validation_block_is_carved_from_training(tiny_manifest):
    fit, val = tiny_manifest.fit_val_split()
    assert {r.block_id for r in fit} == {1}
    assert {r.block_id for r in val} == {2}
    fit, val = tiny_manifest.fit_val_split([1])
    assert {r.block_id for r in fit} == {2}
    assert {r.block_id for r in val} == {1}
    with pytest.raises(ConfigError):
        tiny_manifest.fit_val_split([3])


def test_single_training_block_has_no_validation():
    cfg = validate(from_dict(utils.tiny_dict(data={"blocks": 2, "test_blocks": [2]})))
    fit, val = generate_synthetic(cfg.data, 0).fit_val_split()
    assert len(fit) == 10
    assert val == []


def test_val_blocks_config_checks():
    for bad in ([3], [4], [1, 2]):
        with pytest.raises(ConfigError):
            validate(from_dict(utils.tiny_dict(data={"val_blocks": bad})))


def test_block_outside_range_is_rejected(tiny_manifest, tmp_path):
    records = list(tiny_manifest.records)
    records[0] = dataclasses.replace(records[0], block_id=8)
    with pytest.raises(ValidationError, match="block_id 8"):
        validate_manifest(dataclasses.replace(tiny_manifest, records=records))

    path = str(tmp_path / "manifest")
    save_manifest(tiny_manifest, path)
    header = os.path.join(path, "header.json")
    with open(header) as f:
        h = json.load(f)
    h["records"][0]["block"] = 8
    with open(header, "w") as f:
        json.dump(h, f)
    with pytest.raises(ValidationError, match="block_id 8"):
        load_manifest(path)


def test_header_dims_must_match_arrays(tiny_manifest, tmp_path):
    path = str(tmp_path / "manifest")
    save_manifest(tiny_manifest, path)
    header = os.path.join(path, "header.json")
    with open(header) as f:
        h = json.load(f)
    h["dims"]["channels"] += 1
    with open(header, "w") as f:
        json.dump(h, f)
    with pytest.raises(IngestionError, match="header dims"):
        load_manifest(path)
