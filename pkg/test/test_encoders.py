import numpy as np
import pytest
import torch

import utils
from mindcine.config import EmbedNetConfig
from mindcine.dataset import EmbeddingSpace, slice_windows
from mindcine.defs import ShapeError, UnknownClipError, ValidationError
from mindcine.encoders import (
    EmbedNet,
    MlpEncoder,
    PretrainedAdapter,
    SemanticEncoder,
    build_encoder,
    load_adapter_table,
    make_adapter_table,
    save_adapter_table,
)
from mindcine.semantic import softclip_loss


def test_mlp_encoder(tiny_manifest):
    torch.manual_seed(0)
    enc = MlpEncoder(4, 40, 8, hidden=[16])
    x = torch.randn(3, 4, 40)
    assert enc(x).shape == (3, 8)
    e = enc.encode(tiny_manifest.records[0].eeg)
    assert e.space is EmbeddingSpace.EEG_SEMANTIC
    assert e.dim == 8
    with pytest.raises(ShapeError):
        enc(torch.randn(3, 5, 40))


def test_adapter_trains_only_the_head(tiny_manifest):
    table = make_adapter_table(tiny_manifest.records, 6, seed=1)
    enc = PretrainedAdapter(table, 8)
    assert enc.param_count == 6 * 8 + 8
    assert enc.source_dim == 6

    ids = [r.clip_id for r in tiny_manifest.records[:2]]
    assert enc(None, ids).shape == (2, 8)
    with pytest.raises(UnknownClipError):
        enc(None, ["nope"])
    with pytest.raises(ValidationError):
        enc(torch.zeros(1, 4, 40))


def test_adapter_table_save_load(tiny_manifest, tmp_path):
    table = make_adapter_table(tiny_manifest.records, 6, seed=1)
    path = save_adapter_table(table, str(tmp_path / "table"))
    loaded = load_adapter_table(path)
    assert sorted(loaded) == sorted(table)
    cid = tiny_manifest.records[0].clip_id
    assert np.array_equal(loaded[cid], table[cid])


def test_build_encoder_adapter_needs_table(tiny_cfg, tiny_manifest):
    cfg = tiny_cfg
    cfg.encoder.kind = "adapter"
    with pytest.raises(ValidationError):
        build_encoder(cfg, tiny_manifest.dims)


def test_embednet_shapes():
    torch.manual_seed(0)
    net = EmbedNet(4, 20, EmbedNetConfig(temporal_filters=2, temporal_kernel=5, depth_multiplier=2, pool_out=4, embed_dim=8))
    assert net(torch.randn(2, 3, 4, 20)).shape == (2, 3, 8)
    with pytest.raises(ShapeError):
        net(torch.randn(2, 3, 4, 21))


def test_embednet_shares_weights_across_windows(tiny_manifest):
    torch.manual_seed(0)
    net = EmbedNet(4, 20, EmbedNetConfig(temporal_filters=2, temporal_kernel=5, depth_multiplier=2, pool_out=4, embed_dim=8))
    ws = slice_windows(tiny_manifest.records[0].eeg, 3, 20)
    windows = ws.windows.copy()
    windows[2] = windows[0]
    out = net.extract(windows)
    assert len(out) == 3
    assert all(e.space is EmbeddingSpace.PERCEPTUAL for e in out)
    assert np.allclose(out[0].vector, out[2].vector)
    assert not np.allclose(out[0].vector, out[1].vector)
    with pytest.raises(ValidationError):
        net.extract(np.zeros((0, 4, 20)))


def test_embednet_parameter_gradients():
    torch.manual_seed(0)
    net = EmbedNet(3, 10, EmbedNetConfig(temporal_filters=2, temporal_kernel=3, depth_multiplier=1, pool_out=2, embed_dim=3)).double()
    x = torch.randn(2, 2, 3, 10, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    assert utils.param_gradcheck(net, lambda fwd: (fwd(x) ** 2).sum())


@pytest.fixture(params=["mlp", "adapter"])
def semantic_encoder(request, tiny_manifest):
    torch.manual_seed(0)
    if request.param == "mlp":
        return MlpEncoder(4, 40, 8, hidden=[6])
    return PretrainedAdapter(make_adapter_table(tiny_manifest.records, 6, seed=1), 8)


def _batch(records, dtype=torch.float32):
    eeg = torch.as_tensor(np.stack([r.eeg.data for r in records]), dtype=dtype)
    return eeg, [r.clip_id for r in records]


def test_semantic_encoder_output(semantic_encoder, tiny_manifest):
    assert isinstance(semantic_encoder, SemanticEncoder)
    out = semantic_encoder(*_batch(tiny_manifest.records[:3]))
    assert out.shape == (3, semantic_encoder.joint_dim)
    assert bool(torch.isfinite(out).all())
    assert semantic_encoder.param_count == sum(p.numel() for p in semantic_encoder.parameters() if p.requires_grad)
    assert semantic_encoder.param_count > 0


def test_semantic_encoder_encode_is_deterministic(semantic_encoder, tiny_manifest):
    seg = tiny_manifest.records[4].eeg
    semantic_encoder.train()
    a, b = semantic_encoder.encode(seg), semantic_encoder.encode(seg)
    assert semantic_encoder.training
    assert a.space is EmbeddingSpace.EEG_SEMANTIC
    assert a.dim == semantic_encoder.joint_dim
    assert np.array_equal(a.vector, b.vector)


def test_semantic_encoder_feeds_the_losses(semantic_encoder, tiny_manifest):
    records = tiny_manifest.records[:4]
    targets = torch.randn(4, 8, generator=torch.Generator().manual_seed(2))
    softclip_loss(semantic_encoder(*_batch(records)), targets, tau=0.5).backward()
    for p in semantic_encoder.parameters():
        if p.requires_grad:
            assert p.grad is not None
            assert bool(torch.isfinite(p.grad).all())


def test_semantic_encoder_parameter_gradients(semantic_encoder, tiny_manifest):
    enc = semantic_encoder.double()
    eeg, ids = _batch(tiny_manifest.records[:2], torch.float64)
    assert utils.param_gradcheck(enc, lambda fwd: (fwd(eeg, ids) ** 2).sum())
