import copy
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from vmq import core, model as mdl

GOLDEN = Path(__file__).parent / "golden" / "tiny_block_seed42_ones.json"


def test_zoh_examples():
    abar, bbar = mdl.zoh_discretize(-1.0, 1.0, 1e-6)
    assert abar == pytest.approx(1.0, abs=1e-5) and bbar == pytest.approx(1e-6, rel=1e-5)
    abar, bbar = mdl.zoh_discretize(-1.0, 1.0, 1.0)
    assert abar == pytest.approx(0.367879, abs=1e-6) and bbar == pytest.approx(0.632121, abs=1e-6)
    assert mdl.zoh_discretize(0.0, 2.0, 0.5) == (1.0, 1.0)
    with pytest.raises(ValueError):
        mdl.zoh_discretize(-1.0, 1.0, 0.0)


def test_scan_two_step_hand_recurrence():
    one = np.ones((2, 1))
    y = mdl.selective_scan(one, one, one, one, -np.ones((1, 1)))
    np.testing.assert_allclose(y[:, 0], [1.0, 1.0 + math.exp(-1)], rtol=1e-12)


def test_scan_memoryless_limit_and_zero_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 3))
    dt = rng.uniform(0.1, 1, (6, 3))
    b = rng.standard_normal((6, 2))
    c = rng.standard_normal((6, 2))
    ds = rng.standard_normal(3)
    y = mdl.selective_scan(x, dt, b, c, np.full((3, 2), -1e9), ds)
    expect = dt * (b * c).sum(axis=1, keepdims=True) * x + ds * x
    np.testing.assert_allclose(y, expect, rtol=1e-12, atol=1e-12)
    assert not mdl.selective_scan(np.zeros_like(x), dt, b, c, -np.ones((3, 2)), ds).any()
    with pytest.raises(ValueError):
        mdl.selective_scan(x, -dt, b, c, -np.ones((3, 2)))


@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_scan_matches_scalar_oracle(l, d, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((l, d))
    dt = rng.uniform(1e-3, 1, (l, d))
    b = rng.standard_normal((l, n))
    c = rng.standard_normal((l, n))
    a = -rng.uniform(0.1, 2, (d, n))
    ds = rng.standard_normal(d)
    ref = oracles.scan(x.tolist(), dt.tolist(), b.tolist(), c.tolist(), a.tolist(), ds.tolist())
    np.testing.assert_allclose(mdl.selective_scan(x, dt, b, c, a, ds), ref, rtol=1e-10, atol=1e-12)


def test_block_golden():
    g = json.loads(GOLDEN.read_text())
    spec = mdl.SIZES[g["size"]]
    blk = mdl.make_base_model(spec, g["seed"]).blocks[g["block"]]
    u = np.ones(g["shape"], dtype=np.float32)
    ref = np.array(g["output"])
    np.testing.assert_allclose(mdl.block_forward(blk, u), ref, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(oracles.block(blk, u), ref, rtol=1e-9, atol=1e-9)


def test_block_matches_oracle_on_pathological(tiny_model, tiny_calib):
    u = mdl.embed_tokens(tiny_model, tiny_calib[:1])[0]
    ref = oracles.block(tiny_model.blocks[0], u)
    np.testing.assert_allclose(mdl.block_forward(tiny_model.blocks[0], u), ref, rtol=1e-4, atol=1e-4)


def test_zero_block_is_residual(tiny):
    blk = mdl.zero_model(tiny).blocks[0]
    u = np.random.default_rng(0).standard_normal((5, tiny.d_model)).astype(np.float32)
    np.testing.assert_array_equal(mdl.block_forward(blk, u), u)


def test_single_token_bidirectional_equals_forward(tiny):
    blk = mdl.make_base_model(tiny, 3).blocks[0]
    mirrored = dataclasses.replace(blk, bwd=copy.deepcopy(blk.fwd))
    uni = dataclasses.replace(blk, bwd=None)
    u = np.random.default_rng(1).standard_normal((1, tiny.d_model)).astype(np.float32)
    np.testing.assert_allclose(mdl.block_forward(mirrored, u), mdl.block_forward(uni, u), rtol=1e-6)


def test_block_rejects_wrong_width(tiny):
    with pytest.raises(core.DimensionError):
        mdl.block_forward(mdl.make_base_model(tiny, 0).blocks[0], np.ones((3, tiny.d_model + 1)))


def test_zero_model_logits_are_head_bias(tiny):
    m = mdl.zero_model(tiny)
    x, _ = mdl.gen_calibration_set(0, 3, tiny)
    np.testing.assert_allclose(mdl.model_forward(m, x), np.broadcast_to(m.head.bias, (3, tiny.n_classes)), atol=1e-6)


def test_patch_order_matters(tiny_model, tiny_calib):
    x = tiny_calib[:1]
    perm = x[:, ::-1]
    assert not np.allclose(mdl.model_forward(tiny_model, x), mdl.model_forward(tiny_model, perm))


def test_cls_absent_head_pools_mean(tiny):
    spec = dataclasses.replace(tiny, cls_pos=None)
    m = mdl.make_base_model(spec, 5)
    x, _ = mdl.gen_calibration_set(0, 4, spec)
    logits, t = mdl.model_forward(m, x, return_tokens=True)
    feat = mdl.rms_norm(t, m.norm_w).mean(axis=1)
    np.testing.assert_allclose(logits, feat @ m.head.weight.T + m.head.bias, rtol=1e-5, atol=1e-6)


def test_single_and_batch_agree(tiny_model, tiny_calib):
    batch = mdl.model_forward(tiny_model, tiny_calib[:3])
    for i in range(3):
        np.testing.assert_allclose(mdl.model_forward(tiny_model, tiny_calib[i]), batch[i], rtol=1e-5, atol=1e-6)


def test_cls_rows(tiny):
    assert tiny.cls_index == 8 and tiny.seq_len == 17
    assert mdl.layer_cls_row(tiny, "blocks.0.in_proj") == 8
    assert mdl.layer_cls_row(tiny, "blocks.0.x_proj_b") == 8
    spec = dataclasses.replace(tiny, cls_pos=0)
    assert mdl.layer_cls_row(spec, "blocks.1.dt_proj_b") == 16
    assert mdl.layer_cls_row(dataclasses.replace(tiny, cls_pos=None), "blocks.0.in_proj") is None


def test_calibration_set_determinism(tiny):
    a, la = mdl.gen_calibration_set(9, 5, tiny)
    b, lb = mdl.gen_calibration_set(9, 5, tiny)
    assert a.tobytes() == b.tobytes() and np.array_equal(la, lb)
    c, _ = mdl.gen_calibration_set(10, 5, tiny)
    assert a.tobytes() != c.tobytes()
    one, _ = mdl.gen_calibration_set(0, 1, tiny)
    assert one.shape == (1, tiny.n_patches, tiny.patch_dim)
    with pytest.raises(ValueError):
        mdl.gen_calibration_set(0, 0, tiny)


def test_model_and_dataset_roundtrip(tmp_path, tiny_model, tiny_calib):
    mdl.save_model(tmp_path / "m.vmq", tiny_model)
    m2 = mdl.load_model(tmp_path / "m.vmq")
    assert m2.spec == tiny_model.spec and m2.pathology == tiny_model.pathology
    np.testing.assert_array_equal(mdl.model_forward(m2, tiny_calib), mdl.model_forward(tiny_model, tiny_calib))
    mdl.save_dataset(tmp_path / "d.vmq", tiny_calib, np.arange(len(tiny_calib)))
    x, y = mdl.load_dataset(tmp_path / "d.vmq")
    np.testing.assert_array_equal(x, tiny_calib)
    with pytest.raises(core.ContainerError):
        mdl.load_model(tmp_path / "d.vmq")


def test_pathology_validation(tiny):
    with pytest.raises(ValueError):
        mdl.PathologySpec(channel_gain=0.5)
    with pytest.raises(ValueError):
        mdl.make_pathological_model(tiny, mdl.PathologySpec(outlier_channels=(tiny.d_inner,)))
    with pytest.raises(ValueError):
        mdl.make_pathological_model(tiny, mdl.PathologySpec(token_spikes=((tiny.seq_len, 1.0),)))
    p = mdl.DEFAULT_PATHOLOGY
    assert mdl.PathologySpec.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_linear_paths_cover_model(tiny_model):
    paths = tiny_model.linear_paths()
    assert len(paths) == len(set(paths)) == 6 * tiny_model.spec.n_blocks
    for p in paths:
        assert tiny_model.get_linear(p).weight.ndim == 2
