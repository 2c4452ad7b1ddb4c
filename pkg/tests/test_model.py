import pytest
import torch

from oracles import gradient_suite, reversal_direction_check, tiny_arch
from sar.errors import CheckpointError, ShapeError
from sar.model import (
    Arch,
    EncoderFeatures,
    SegNet,
    decoder_forward,
    encoder_forward,
    grad_reverse,
    init_pretrain_model,
    init_seg_model,
    load_checkpoint,
    mial_forward,
    parameter_count,
    sa_forward,
    save_checkpoint,
    seg_forward,
)

ARCHS = [
    tiny_arch(),
    Arch(depth=3, base_channels=4, input_shape=(16, 16, 8), sa_hidden=8, mial_channels=4, mial_hidden=8),
    Arch(depth=1, base_channels=3, input_shape=(5, 6, 7), sa_hidden=4, mial_channels=2, mial_hidden=4),
]


def _x(arch, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 1, *arch.input_shape, generator=g)


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: f"d{a.depth}")
def test_forward_shape_contracts(arch):
    model = init_pretrain_model(arch).eval()
    x = _x(arch, batch=3)
    feats = encoder_forward(x, model)
    assert len(feats.levels) == arch.depth
    for f, c, s in zip(feats.levels, arch.channels, arch.level_shapes()):
        assert tuple(f.shape) == (3, c, *s)
    recon = decoder_forward(feats, model)
    assert recon.shape == x.shape
    assert recon.min() >= 0 and recon.max() <= 1
    assert sa_forward(feats.bottleneck, model).shape == (3, 3)
    d = mial_forward(feats, model)
    assert d.shape == (3,)
    assert torch.all((d > 0) & (d < 1))


def test_architecture_validation():
    with pytest.raises(ValueError):
        Arch(depth=3, input_shape=(8, 8, 6))
    with pytest.raises(ValueError):
        Arch(depth=0)
    a = Arch()
    assert a.channels == [16, 32, 64, 128]
    assert Arch.from_dict(a.to_dict()) == a


def test_encoder_rejects_wrong_shape():
    model = init_pretrain_model(tiny_arch())
    with pytest.raises(ShapeError, match="8, 8, 4"):
        model.encoder(torch.zeros(1, 1, 8, 8, 8))
    feats = EncoderFeatures([torch.zeros(1, 2, 8, 8, 4)])
    with pytest.raises(ShapeError):
        model.decoder(feats)
    with pytest.raises(ShapeError):
        model.scale_head(torch.zeros(1, 3, 2, 2, 2))


def test_scale_head_pools_globally():
    arch = tiny_arch()
    model = init_pretrain_model(arch).eval()
    c = arch.channels[-1]
    a = torch.rand(1, c, 4, 4, 2)
    # Permuting voxels leaves the global average untouched.
    b = a.flatten(2)[..., torch.randperm(32)].reshape(a.shape)
    torch.testing.assert_close(sa_forward(a, model), sa_forward(b, model))
    const = a.mean(dim=(2, 3, 4), keepdim=True).expand_as(a)
    torch.testing.assert_close(sa_forward(a, model), sa_forward(const, model))


def test_softmax_scores_sum_to_one():
    arch = ARCHS[1]
    seg = init_seg_model(arch, 3).eval()
    scores = seg_forward(_x(arch), seg, 3)
    assert scores.shape == (2, 3, *arch.input_shape)
    torch.testing.assert_close(scores.sum(1), torch.ones(2, *arch.input_shape))
    with pytest.raises(ValueError):
        seg_forward(_x(arch), seg, 4)


def test_dense_connections_feed_discriminator():
    arch = ARCHS[1]
    model = init_pretrain_model(arch).eval()
    feats = encoder_forward(_x(arch), model)
    deep = EncoderFeatures([feats.levels[0], feats.levels[1] * 3, feats.levels[2]])
    # Changing a middle level only matters through the dense path.
    assert not torch.allclose(mial_forward(feats, model), mial_forward(deep, model))
    torch.testing.assert_close(mial_forward(feats, model, dense=False), mial_forward(deep, model, dense=False))


def test_discriminator_gradient_reaches_encoder():
    model = init_pretrain_model(tiny_arch()).train()
    out = model(_x(tiny_arch(), batch=4), reversal=1.0)
    out["d"].sum().backward()
    grads = [p.grad for p in model.encoder.parameters()]
    assert all(g is not None for g in grads)
    assert sum(float(g.abs().sum()) for g in grads) > 0


def test_grad_reverse():
    x = torch.tensor([1.0, -2.0], requires_grad=True)
    y = grad_reverse(x, 0.5)
    assert torch.equal(y, x)
    (y * torch.tensor([3.0, 4.0])).sum().backward()
    torch.testing.assert_close(x.grad, torch.tensor([-1.5, -2.0]))


def test_batchnorm_eval_is_deterministic_and_batch_independent():
    arch = tiny_arch()
    model = init_pretrain_model(arch)
    model.train()
    for seed in range(3):
        model(_x(arch, batch=4, seed=seed))
    model.eval()
    x = _x(arch, batch=4, seed=9)
    with torch.no_grad():
        full = model(x)["recon"]
        torch.testing.assert_close(model(x)["recon"], full, rtol=0, atol=0)
        torch.testing.assert_close(model(x[:1])["recon"], full[:1])


def test_init_is_seed_deterministic():
    a = init_pretrain_model(tiny_arch(), seed=3)
    b = init_pretrain_model(tiny_arch(), seed=3)
    c = init_pretrain_model(tiny_arch(), seed=4)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
    state = torch.random.get_rng_state()
    init_pretrain_model(tiny_arch(), seed=5)
    assert torch.equal(state, torch.random.get_rng_state())


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: f"d{a.depth}")
def test_parameter_count_is_function_of_arch(arch):
    assert parameter_count(init_pretrain_model(arch, 0)) == parameter_count(init_pretrain_model(arch, 1))


def test_groups_share_no_parameters():
    model = init_pretrain_model(ARCHS[1])
    groups = model.param_groups()
    ids = [id(p) for ps in groups.values() for p in ps]
    assert len(ids) == len(set(ids))
    assert len(ids) == len(list(model.parameters()))


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    arch = ARCHS[1]
    model = init_pretrain_model(arch, 7).eval()
    path = save_checkpoint(model, tmp_path / "m.pt", {"epoch": 3})
    loaded, meta = load_checkpoint(path)
    loaded.eval()
    assert meta == {"epoch": 3}
    assert loaded.arch == arch
    x = _x(arch)
    with torch.no_grad():
        a, b = model(x), loaded(x)
    for key in ("recon", "scale_logits", "d"):
        assert torch.equal(a[key], b[key])
    assert not list(tmp_path.glob("*.tmp"))


def test_segnet_checkpoint_roundtrip(tmp_path):
    seg = init_seg_model(tiny_arch(), 3, seed=1)
    loaded, _ = load_checkpoint(save_checkpoint(seg, tmp_path / "s.pt"))
    assert isinstance(loaded, SegNet) and loaded.n_classes == 3
    for p, q in zip(seg.parameters(), loaded.parameters()):
        assert torch.equal(p, q)


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="not a"):
        load_checkpoint(tmp_path / "other.pt")


def test_transfer_copies_encoder_and_decoder_body(tmp_path):
    arch = tiny_arch()
    pre = init_pretrain_model(arch, 11)
    path = save_checkpoint(pre, tmp_path / "p.pt")
    seg = init_seg_model(arch, 3, seed=0, checkpoint=path)
    for (n, p), q in zip(pre.encoder.state_dict().items(), seg.encoder.state_dict().values()):
        assert torch.equal(p, q), n
    for n, p in pre.decoder.state_dict().items():
        if not n.startswith("head."):
            assert torch.equal(p, seg.decoder.state_dict()[n]), n
    assert seg.decoder.head.out_channels == 3
    fresh = init_seg_model(arch, 3, seed=0)
    assert torch.equal(seg.decoder.head.weight, fresh.decoder.head.weight)


def test_transfer_rejects_other_arch(tmp_path):
    path = save_checkpoint(init_pretrain_model(tiny_arch()), tmp_path / "p.pt")
    with pytest.raises(CheckpointError, match="incompatible"):
        init_seg_model(ARCHS[1], 2, checkpoint=path)


def test_segnet_needs_two_classes():
    with pytest.raises(ValueError):
        SegNet(tiny_arch(), 1)


# --- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_analytic_gradients_match_finite_differences(seed):
    report = gradient_suite(n_probes=20, step=1e-4, seed=seed)
    assert set(report) == {"l_res", "l_scale", "l_adv"}
    for key, err in report.items():
        assert err < 1e-3, (key, err)


def test_reversal_moves_discriminator_and_encoder_oppositely():
    before, after_m, after_e = reversal_direction_check()
    assert after_m < before
    assert after_e > after_m
