import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mirror_unet.config import SHARING_SCHEMES, VERSIONS, ConfigError, ModelConfig
from mirror_unet.model import (
    build_model,
    classify,
    count_parameters,
    forward,
    fuse_logits,
    shared_representation,
    state_arrays,
)

from conftest import TINY_WIDTHS


def _inputs(patch, seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    shape = (batch, 1, patch, patch, patch)
    return torch.rand(shape, generator=g), torch.rand(shape, generator=g)


def _stage_count(model, idx):
    return sum(p.numel() for p in model.branchA.stage(idx).parameters())


def test_untied_branches_equal_size_disjoint_storage(tiny_config):
    m = build_model(tiny_config(shared=()))
    a, b = list(m.branchA.parameters()), list(m.branchB.parameters())
    assert sum(p.numel() for p in a) == sum(p.numel() for p in b)
    assert not {p.data_ptr() for p in a} & {p.data_ptr() for p in b}


def test_sharing_bottleneck_saves_exactly_one_stage(tiny_config):
    free = build_model(tiny_config(shared=()))
    tied = build_model(tiny_config(shared=(5,)))
    assert count_parameters(free) - count_parameters(tied) == _stage_count(free, 5)


@pytest.mark.parametrize("shared", SHARING_SCHEMES)
def test_parameter_count_formula(tiny_config, shared):
    m = build_model(tiny_config(shared=shared))
    branch = sum(p.numel() for p in m.branchA.parameters())
    btl = sum(p.numel() for p in m.btl_decoder.parameters())
    clf = sum(p.numel() for p in m.classifier.parameters())
    tied = sum(_stage_count(m, i) for i in shared)
    assert count_parameters(m) == 2 * branch - tied + btl + clf


def test_invalid_stage_index(tiny_config):
    with pytest.raises(ConfigError, match="invalid stage index"):
        tiny_config(shared=(9,))
    with pytest.raises(ConfigError, match="invalid stage index"):
        tiny_config(shared=(0, 5))


def test_patch_must_be_divisible_by_16():
    with pytest.raises(ConfigError, match="divisible by 16"):
        ModelConfig(version="v1", in_patch=(96, 96, 40))


def test_theta_only_for_v4():
    with pytest.raises(ConfigError, match="theta undefined for v1"):
        ModelConfig(version="v1", theta=0.3)
    assert ModelConfig(version="v4").theta == 0.25


def test_seeded_initialisation_is_deterministic(tiny_config):
    a = state_arrays(build_model(tiny_config(seed=7)))
    b = state_arrays(build_model(tiny_config(seed=7)))
    c = state_arrays(build_model(tiny_config(seed=8)))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_v1_outputs_at_96():
    m = build_model(ModelConfig(version="v1", shared={5}, stage_widths=TINY_WIDTHS, in_patch=(96, 96, 96)))
    with torch.no_grad():
        out = forward(m, *_inputs(96), version="v1")
    assert out.out_A.shape == out.out_B.shape == (1, 1, 96, 96, 96)
    assert out.out_btl is None and out.class_logit is None


def test_v3_outputs_at_96():
    m = build_model(ModelConfig(version="v3", shared={5}, stage_widths=TINY_WIDTHS, in_patch=(96, 96, 96)))
    with torch.no_grad():
        out = m(*_inputs(96))
    assert out.out_btl.shape == (1, 1, 96, 96, 96)
    assert out.class_logit.shape == (1,)


def test_forward_rejects_shape_mismatch(tiny_config):
    m = build_model(tiny_config())
    with pytest.raises(ValueError, match="shape mismatch"):
        m(torch.zeros(1, 1, 16, 16, 16), torch.zeros(1, 1, 32, 16, 16))


def test_zeroed_bottleneck_decoder(tiny_config):
    m = build_model(tiny_config(version="v2"))
    x_A, x_B = _inputs(16)
    with torch.no_grad():
        before = m(x_A, x_B)
        for p in m.btl_decoder.parameters():
            p.zero_()
        after = m(x_A, x_B)
    bias = m.btl_decoder.head.proj.bias.item()
    assert torch.all(after.out_btl == bias)
    assert torch.equal(before.out_A, after.out_A)
    assert torch.equal(before.out_B, after.out_B)


@pytest.mark.parametrize("version", VERSIONS)
@pytest.mark.parametrize("shared", SHARING_SCHEMES)
def test_output_shapes_all_versions_and_sharing(version, shared):
    cfg = ModelConfig(version=version, shared=shared, stage_widths=TINY_WIDTHS, in_patch=(32, 16, 48))
    m = build_model(cfg)
    x_A = torch.rand(2, 1, 32, 16, 48)
    with torch.no_grad():
        out = m(x_A, x_A.clone())
    for name in ("out_A", "out_B", "out_btl"):
        t = getattr(out, name)
        if t is not None:
            assert t.shape[2:] == (32, 16, 48)
    assert (out.out_btl is not None) == (version in ("v2", "v3", "v2-brain", "v2-rec-brain"))
    assert (out.class_logit is not None) == (version == "v3")


def test_shared_representation_width_and_resolution():
    cfg = ModelConfig(version="v3", shared={5}, stage_widths=(4, 8, 16, 32, 256), in_patch=(96, 96, 96))
    m = build_model(cfg)
    with torch.no_grad():
        z = shared_representation(m, *_inputs(96))
    assert z.shape == (1, 512, 6, 6, 6)


def test_shared_representation_is_branchwise_concatenation(tiny_config):
    m = build_model(tiny_config(shared=(5,)))
    x_A, x_B = _inputs(16)
    with torch.no_grad():
        z = m.shared_representation(x_A, x_B)
        za, _ = m.branchA.encode(x_A)
        zb, _ = m.branchB.encode(x_B)
    assert torch.equal(z, torch.cat([za, zb], 1))


def test_swapping_inputs_swaps_halves_with_tied_encoders(tiny_config):
    m = build_model(tiny_config(shared=(1, 2, 3, 4, 5)))
    x_A, x_B = _inputs(16)
    with torch.no_grad():
        z = m.shared_representation(x_A, x_B)
        zs = m.shared_representation(x_B, x_A)
    c = z.shape[1] // 2
    assert torch.equal(z[:, :c], zs[:, c:]) and torch.equal(z[:, c:], zs[:, :c])


def test_identical_inputs_tied_encoders_give_equal_halves(tiny_config):
    m = build_model(tiny_config(shared=(1, 2, 3, 4, 5, 6)))
    x, _ = _inputs(16)
    with torch.no_grad():
        z = m.shared_representation(x, x.clone())
    c = z.shape[1] // 2
    assert torch.equal(z[:, :c], z[:, c:])


def test_fuse_logits_examples():
    ct, pet = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(fuse_logits(ct, pet, 0.0), pet)
    assert torch.allclose(fuse_logits(ct, pet, 0.5), (ct + pet) / 2)
    assert fuse_logits(torch.tensor(2.0), torch.tensor(0.0), 0.3).item() == pytest.approx(0.6, abs=1e-7)
    with pytest.raises(ValueError):
        fuse_logits(torch.zeros(2), torch.zeros(3), 0.1)


@given(st.integers(0, 2**16), st.integers(1, 50))
def test_fuse_at_zero_theta_preserves_pet_binarisation(seed, n):
    g = torch.Generator().manual_seed(seed)
    ct, pet = torch.randn(n, generator=g) * 5, torch.randn(n, generator=g) * 5
    assert torch.equal(fuse_logits(ct, pet, 0.0) >= 0, pet >= 0)


def test_classify_zero_final_layer_gives_half(tiny_config):
    m = build_model(tiny_config(version="v3"))
    with torch.no_grad():
        m.classifier.fc2.weight.zero_()
        m.classifier.fc2.bias.zero_()
        p = classify(m, m.shared_representation(*_inputs(16)))
    assert p.item() == 0.5


def test_classify_range_and_batch_determinism(tiny_config):
    m = build_model(tiny_config(version="v3"))
    x_A, x_B = _inputs(16, batch=1)
    with torch.no_grad():
        z = m.shared_representation(x_A.repeat(3, 1, 1, 1, 1), x_B.repeat(3, 1, 1, 1, 1))
        p = classify(m, z * 100)
    assert torch.all((p > 0) & (p < 1))
    assert p[0] == p[1] == p[2]


def test_classify_channel_mismatch(tiny_config):
    m = build_model(tiny_config(version="v3"))
    with pytest.raises(ValueError, match="channels"):
        classify(m, torch.zeros(1, 3, 1, 1, 1))


def test_gradient_flow_through_shared_bottleneck(tiny_config):
    cfg = tiny_config(version="v1", shared=(5,))
    m = build_model(cfg).double()
    x_A, x_B = (t.double() for t in _inputs(16))

    def loss():
        with torch.no_grad():
            return m(x_A, x_B).out_B.pow(2).mean().item()

    base = loss()
    eps = 1e-4
    w5 = m.branchA.stage5.conv1.weight
    # centre taps: border taps only see zero padding at the 1^3 bottleneck
    with torch.no_grad():
        w5[0, 0, 1, 1, 1] += eps
    assert abs(loss() - base) > 1e-12
    with torch.no_grad():
        w5[0, 0, 1, 1, 1] -= eps
        m.branchA.stage1.conv1.weight[0, 0, 1, 1, 1] += eps
    assert loss() == base


def test_bottleneck_decoder_ignores_branch_skips(tiny_config):
    m = build_model(tiny_config(version="v2", shared=(5,)))
    x_A, x_B = _inputs(16)
    with torch.no_grad():
        ref = m(x_A, x_B)
        for branch in (m.branchA, m.branchB):
            for mod in (branch.stage6, branch.stage7, branch.stage8, branch.head):
                for p in mod.parameters():
                    p.add_(torch.randn_like(p))
        # corrupt every skip tensor handed to the branch decoders
        for branch in (m.branchA, m.branchB):
            orig = branch.decode
            branch.decode = lambda z, skips, orig=orig: orig(z, tuple(s * -3.0 + 1.0 for s in skips))
        out = m(x_A, x_B)
    assert torch.equal(out.out_btl, ref.out_btl)
    assert not torch.equal(out.out_B, ref.out_B)


def test_checkpoint_names_and_tied_entries(tiny_config):
    m = build_model(tiny_config(shared=(3, 5)))
    arrays = state_arrays(m)
    assert "branchA.stage3.conv1.weight" in arrays
    assert arrays["branchA.stage3.conv1.weight"].dtype == np.dtype("<f4")
    for idx in (3, 5):
        assert np.array_equal(arrays[f"branchA.stage{idx}.conv1.weight"], arrays[f"branchB.stage{idx}.conv1.weight"])
    assert not np.array_equal(arrays["branchA.stage4.conv1.weight"], arrays["branchB.stage4.conv1.weight"])


def test_learnable_theta_starts_at_quarter(tiny_config):
    m = build_model(tiny_config(version="v4", theta="learnable"))
    assert float(m.theta()) == pytest.approx(0.25)
    assert m.theta_logit.requires_grad
