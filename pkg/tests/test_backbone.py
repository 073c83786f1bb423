import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from templet import autodiff as ad
from templet.autodiff import KVBank, LoRADelta
from templet.backbone import (DenoiserConfig, DenoiserModel, GenerationRequest, InjectionError, apply_step_constraints,
                              flow_loss, forward_noised, guide, interpolate, sample, sample_latent, vae_decode,
                              vae_encode)
from templet.caches import CacheBundle, KVCache, LoRACache, StepConstraint, merge_heterogeneous
from templet.package import IntegrityError
from templet.rng import SplitMix64

from helpers import slice_gradcheck
from oracles import avg_pool2, select

# --------------------------------------------------------------------------- VAE


def test_encode_constant():
    assert np.all(vae_encode(np.full((8, 8, 3), 0.3, np.float32)) == np.float32(0.3))


def test_encode_checkerboard_blocks():
    img = np.zeros((4, 4, 3), np.float32)
    img[0, 0] = img[1, 1] = img[2, 2] = img[3, 3] = 1.0
    img[0, 2] = img[1, 3] = img[2, 0] = img[3, 1] = 1.0
    assert np.all(vae_encode(img) == 0.5)


def test_encode_matches_loop_oracle():
    img = np.random.default_rng(0).random((8, 12, 3)).astype(np.float32)
    np.testing.assert_allclose(vae_encode(img), avg_pool2(img), atol=1e-7)


def test_encode_bad_size():
    with pytest.raises(ValueError):
        vae_encode(np.zeros((6, 8, 3)))


def test_encode_decode_identity_on_block_constant():
    lat = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    img = np.repeat(np.repeat(lat, 2, 0), 2, 1)
    assert np.array_equal(vae_decode(vae_encode(img)), img)


def test_decode_constant_and_zero():
    assert np.all(vae_decode(np.full((4, 4, 3), 0.7, np.float32)) == np.float32(0.7))
    assert np.all(vae_decode(np.zeros((4, 4, 3), np.float32)) == 0)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, (4, 4, 3), elements=st.floats(-2, 2, width=32)))
def test_round_trip_idempotent_after_one_cycle(lat):
    once = vae_decode(vae_encode(vae_decode(lat)))
    twice = vae_decode(vae_encode(vae_decode(vae_encode(vae_decode(lat)))))
    assert np.array_equal(once, twice)
    assert once.min() >= 0 and once.max() <= 1


# --------------------------------------------------------------------------- model


def test_model_shape_and_size():
    m = DenoiserModel.create(0)
    assert m.parameter_count() < 1_000_000
    x = np.zeros((2, 16, 16, 3), np.float32)
    assert m(x, np.array([0.5, 0.5]), np.array([0, 3])).shape == (2, 16, 16, 3)
    assert m.cfg.n_patches == 64 and m.cfg.null_condition == 3


def test_forward_is_pure(base):
    x = SplitMix64(0).normal((1, 16, 16, 3))
    a = base(x, 0.3, 1).data
    b = base(x, 0.3, 1).data
    assert a.tobytes() == b.tobytes()


def test_create_deterministic():
    assert DenoiserModel.create(3).weights_sha256() == DenoiserModel.create(3).weights_sha256()
    assert DenoiserModel.create(3).weights_sha256() != DenoiserModel.create(4).weights_sha256()


def test_save_load_round_trip(tmp_path, base):
    base.save(tmp_path / "b")
    back = DenoiserModel.load(tmp_path / "b")
    assert back.weights_sha256() == base.weights_sha256()
    (tmp_path / "b" / "weights.tmpl").write_bytes(b"TMPL" + b"\0" * 8)
    with pytest.raises(IntegrityError):
        DenoiserModel.load(tmp_path / "b")


def test_check_bundle_errors(base):
    d = base.cfg.d_model
    bad_layer = CacheBundle(kv=KVCache({9: KVBank(9, np.zeros((1, d)), np.zeros((1, d)))}))
    bad_width = CacheBundle(kv=KVCache({0: KVBank(0, np.zeros((1, 8)), np.zeros((1, 8)))}))
    bad_target = CacheBundle(lora=LoRACache({"nope": [LoRADelta("nope", np.zeros((1, 64)), np.zeros((64, 1)))]}))
    bad_shape = CacheBundle(lora=LoRACache({"out": [LoRADelta("out", np.zeros((1, 64)), np.zeros((64, 1)))]}))
    bad_mask = CacheBundle(constraints=[StepConstraint(np.ones((8, 8, 3), np.float32), np.zeros((8, 8, 3), np.float32))])
    for b in (bad_layer, bad_width, bad_target, bad_shape, bad_mask):
        with pytest.raises(InjectionError):
            base.check_bundle(b)


def test_backbone_gradcheck(base):
    rng = np.random.default_rng(4)
    x0 = rng.random((2, 16, 16, 3)).astype(np.float32)
    noise = rng.standard_normal((2, 16, 16, 3)).astype(np.float32)
    t, conds = np.array([0.3, 0.8], np.float32), np.array([0, 3])

    def loss_of(params):
        model = DenoiserModel(base.state_dict(), base.cfg)
        model.params = params
        return flow_loss(model, x0, conds, noise, t)

    errs = slice_gradcheck(loss_of, base.state_dict(), per_tensor=3)
    assert max(errs.values()) <= 1e-3, {k: v for k, v in errs.items() if v > 1e-3}


# --------------------------------------------------------------------------- loss


class _Const:
    def __init__(self, out):
        self.out = out

    def __call__(self, xt, t, cond, bundle=None):
        return ad.tensor(self.out)


def test_flow_loss_zero_for_exact_velocity():
    rng = np.random.default_rng(0)
    x0, noise = rng.standard_normal((2, 4, 4, 3)), rng.standard_normal((2, 4, 4, 3))
    v = (noise.astype(np.float32) - x0.astype(np.float32))
    assert flow_loss(_Const(v), x0, 0, noise, np.array([0.3, 0.6])).item() == 0.0


def test_flow_loss_single_pixel_arithmetic():
    x0, noise = np.full((1, 1, 1), 0.2), np.full((1, 1, 1), 1.0)
    np.testing.assert_allclose(interpolate(x0, noise, 0.5), 0.6, rtol=1e-6)
    np.testing.assert_allclose(flow_loss(_Const(np.zeros((1, 1, 1))), x0, 0, noise, 0.5).item(), 0.64, rtol=1e-6)


def test_interpolation_endpoint():
    x0, noise = np.full(3, 0.25, np.float32), np.ones(3, np.float32)
    np.testing.assert_allclose(interpolate(x0, noise, 1e-7), x0, atol=1e-6)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_flow_loss_rejects_t(t):
    with pytest.raises(ValueError):
        flow_loss(_Const(np.zeros(1)), np.zeros(1), 0, np.zeros(1), t)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_flow_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    out = rng.standard_normal((1, 2, 2, 3))
    assert flow_loss(_Const(out), rng.random((1, 2, 2, 3)), 0, rng.standard_normal((1, 2, 2, 3)), 0.5).item() >= 0


# --------------------------------------------------------------------------- sampling


def test_guidance_cancels():
    v = np.random.default_rng(0).standard_normal(5).astype(np.float32)
    for s in (0.0, 1.0, 4.0, 7.5):
        assert np.array_equal(guide(v, v, s), v)


def test_guidance_identities_bitwise():
    rng = np.random.default_rng(1)
    vc, vn = rng.standard_normal(5).astype(np.float32), rng.standard_normal(5).astype(np.float32)
    assert guide(vc, vn, 0.0) is vn and guide(vc, vn, 1.0) is vc


def test_sample_deterministic(base):
    req = GenerationRequest(seed=0, steps=8)
    assert sample(base, req).tobytes() == sample(base, req).tobytes()


def test_single_step_is_one_euler_update(base):
    req = GenerationRequest(condition_id=1, seed=5, steps=1, guidance_scale=1.0)
    x1 = SplitMix64(5).normal((16, 16, 3))
    v = base(x1[None], np.ones(1, np.float32), np.array([1])).data[0]
    np.testing.assert_allclose(sample_latent(base, req), x1 - v, atol=1e-6)


def test_cfg_scale_zero_is_unconditional(base):
    uncond = sample_latent(base, GenerationRequest(condition_id=0, seed=2, steps=4, guidance_scale=0.0))
    other = sample_latent(base, GenerationRequest(condition_id=2, seed=2, steps=4, guidance_scale=0.0))
    assert uncond.tobytes() == other.tobytes()


def test_request_validation():
    for kw in ({"steps": 0}, {"guidance_scale": -1}, {"seed": -1}, {"width": 64}):
        with pytest.raises(ValueError):
            GenerationRequest(**kw)
    r = GenerationRequest()
    assert (r.seed, r.steps, r.guidance_scale) == (0, 50, 4.0)


def test_constraint_all_ones_is_identity():
    lat = np.random.default_rng(0).standard_normal((4, 4, 3)).astype(np.float32)
    c = StepConstraint(np.ones_like(lat), np.zeros_like(lat))
    assert np.array_equal(apply_step_constraints(lat, [c], 0.5, np.zeros_like(lat)), lat)


def test_constraint_all_zeros_final_is_reference():
    rng = np.random.default_rng(1)
    lat, ref = (rng.standard_normal((4, 4, 3)).astype(np.float32) for _ in range(2))
    out = apply_step_constraints(lat, [StepConstraint(np.zeros_like(lat), ref)], 0.0)
    assert out.tobytes() == ref.tobytes()


def test_constraint_mixed_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    lat, ref, noise = (rng.standard_normal((4, 4, 3)).astype(np.float32) for _ in range(3))
    mask = (rng.random((4, 4, 3)) > 0.5).astype(np.float32)
    out = apply_step_constraints(lat, [StepConstraint(mask, ref)], 0.3, noise)
    assert np.array_equal(out, select(mask, lat, forward_noised(ref, noise, 0.3)))


def test_constraint_shape_mismatch():
    lat = np.zeros((4, 4, 3), np.float32)
    c = StepConstraint(np.ones((2, 2, 3), np.float32), np.zeros((2, 2, 3), np.float32))
    with pytest.raises(ad.ShapeError):
        apply_step_constraints(lat, [c], 0.0)


def test_sampler_keeps_unmasked_reference(base):
    rng = np.random.default_rng(3)
    ref = vae_encode(rng.random((32, 32, 3)).astype(np.float32))
    mask = np.zeros((16, 16, 3), np.float32)
    mask[4:10, 3:12] = 1
    bundle = merge_heterogeneous([])
    bundle.constraints = [StepConstraint(mask, ref)]
    out = sample_latent(base, GenerationRequest(seed=1, steps=5), bundle)
    assert np.array_equal(out[mask == 0], ref[mask == 0])


def test_custom_config_builds():
    m = DenoiserModel.create(0, DenoiserConfig(depth=2))
    assert m.cfg.depth == 2 and "blocks.1.attn.out" in m.linear_targets and "blocks.2.attn.out" not in m.linear_targets
