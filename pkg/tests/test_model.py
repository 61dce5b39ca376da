import numpy as np
import pytest

from posegrf import tensor as T
from posegrf.metrics import GateSchedule, gated_mse, mpjpe
from posegrf.model import (CheckpointError, ModelConfig, ModelParameters, check_params, forward, init_params,
                           load_checkpoint, param_count, predict, save_checkpoint, spatial_encode, swap_head,
                           temporal_encode, trunk_digest)

TINY = ModelConfig(joints=3, channels=2, receptive_field=3, embed_dim=4, num_heads=2, depth=1)
SMALL = ModelConfig(receptive_field=9, embed_dim=8, num_heads=2, depth=1)


def windows(cfg, n=2, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.receptive_field, cfg.input_dim))


def test_default_parameter_count():
    # spatial 34,880 + temporal 9,539,040 + reducer 81 + force head 3,270
    assert param_count(ModelConfig()) == 9_577_271
    assert param_count(ModelConfig(), ("force", "pose")) == 9_577_271 + 27_795


@pytest.mark.parametrize("cfg", [TINY, SMALL])
def test_param_count_matches_init(cfg):
    p = init_params(cfg, heads=("force", "pose"))
    assert sum(v.size for v in p.values() if v.requires_grad) == param_count(cfg, ("force", "pose"))
    assert not p["input.gain"].requires_grad


@pytest.mark.parametrize("kwargs", [dict(embed_dim=6, num_heads=4), dict(receptive_field=0), dict(dropout=1.0)])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_config_round_trip():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"width": 3})


def test_output_shapes():
    p = init_params(SMALL, heads=("force", "pose"))
    X = windows(SMALL, 3)
    f, P = forward(p, SMALL, X, "both")
    assert f.shape == (3, 6) and P.shape == (3, 17, 3)
    assert forward(p, SMALL, X[0]).shape == (6,)
    assert forward(p, SMALL, X[0], "pose3d").shape == (17, 3)
    assert spatial_encode(p, SMALL, X[0].reshape(9, 17, 2)).shape == (9, 17 * 8)
    assert temporal_encode(p, SMALL, np.zeros((2, 9, 136))).shape == (2, 9, 136)


def test_mode_without_head():
    p = init_params(TINY, heads=("force",))
    with pytest.raises(ValueError, match="pose"):
        forward(p, TINY, windows(TINY), "pose3d")
    with pytest.raises(ValueError):
        forward(p, TINY, windows(TINY), "both")
    with pytest.raises(ValueError):
        forward(p, TINY, windows(TINY), "forces")


def test_shape_errors():
    p = init_params(TINY)
    with pytest.raises(T.ShapeError):
        forward(p, TINY, np.zeros((2, 4, 6)))
    with pytest.raises(T.ShapeError):
        spatial_encode(p, TINY, np.zeros((3, 3)))


def test_zero_params_zero_output_without_layer_norm():
    cfg = ModelConfig(joints=3, channels=2, receptive_field=3, embed_dim=4, num_heads=2, depth=2, layer_norm=False)
    p = init_params(cfg)
    for v in p.values():
        v.data[...] = 0.0
    out = spatial_encode(p, cfg, np.zeros((5, 3, 2)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_joint_permutation_changes_output():
    p = init_params(SMALL, seed=1)
    frame = np.random.default_rng(2).normal(size=(17, 2))
    a = spatial_encode(p, SMALL, frame).data
    b = spatial_encode(p, SMALL, frame[::-1]).data
    assert not np.allclose(a, b)


def test_temporal_permutation_equivariance_without_positions():
    p = init_params(SMALL, seed=3)
    p["temporal.pos"].data[...] = 0.0
    emb = np.random.default_rng(4).normal(size=(1, 9, 136))
    perm = np.random.default_rng(5).permutation(9)
    a = temporal_encode(p, SMALL, emb).data
    b = temporal_encode(p, SMALL, emb[:, perm]).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_attention_rows_stochastic():
    p = init_params(SMALL, seed=0)
    record = []
    forward(p, SMALL, windows(SMALL, 2), attention=record)
    assert len(record) == 2 * SMALL.depth
    for _, attn in record:
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
        assert (attn >= 0).all()


def test_deterministic():
    X = windows(SMALL, 2, seed=9)
    a = forward(init_params(SMALL, 7), SMALL, X).data
    b = forward(init_params(SMALL, 7), SMALL, X).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, forward(init_params(SMALL, 8), SMALL, X).data)


def test_reducer_starts_as_average():
    p = init_params(SMALL)
    np.testing.assert_array_equal(p["reducer.weight"].data, np.full(9, 1 / 9))


def test_full_model_gradient_check():
    p = init_params(TINY, seed=0, heads=("force",))
    X = windows(TINY, 2, seed=1)
    y = np.random.default_rng(2).normal(0, 5, (2, 6))
    names = sorted(k for k, v in p.items() if v.requires_grad)
    sched = GateSchedule(T=2)

    def loss(tensors):
        q = ModelParameters(p)
        q.update(zip(names, tensors))
        return gated_mse(forward(q, TINY, X), y, sched)

    assert T.finite_difference_check(loss, [p[n] for n in names]) < 1e-4


def test_pose_head_gradient_check():
    cfg = ModelConfig(joints=17, channels=2, receptive_field=3, embed_dim=2, num_heads=1, depth=1)
    p = init_params(cfg, seed=0, heads=("pose",))
    X = windows(cfg, 1, seed=1)
    target = np.random.default_rng(2).normal(size=(1, 17, 3))
    names = ["head.pose.bias", "reducer.weight", "spatial.embed.weight", "spatial.blocks.0.attn.qkv.bias"]
    rest = {k: v for k, v in p.items() if k not in names}

    def loss(tensors):
        q = ModelParameters(rest)
        q.update(zip(names, tensors))
        return mpjpe(forward(q, cfg, X, "pose3d"), target)

    assert T.finite_difference_check(loss, [p[n] for n in names]) < 1e-4


def test_swap_head_preserves_trunk():
    p = init_params(SMALL, seed=0, heads=("pose",))
    X = windows(SMALL, 2)
    from posegrf.model import encode
    before = encode(p, SMALL, X).data
    q = swap_head(p, SMALL, "force", seed=11)
    assert q.heads == ("force",)
    assert trunk_digest(p) == trunk_digest(q)
    np.testing.assert_array_equal(encode(q, SMALL, X).data, before)
    for k in p.trunk():
        assert q[k] is not p[k]


def test_swap_head_fresh_seed_differs():
    p = init_params(SMALL, seed=0)
    q = swap_head(p, SMALL, "force", seed=1)
    X = windows(SMALL, 2)
    assert not np.allclose(forward(p, SMALL, X).data, forward(q, SMALL, X).data)


def test_swap_head_incompatible_trunk():
    p = init_params(SMALL, seed=0)
    with pytest.raises(T.ShapeError):
        swap_head(p, ModelConfig(receptive_field=27, embed_dim=8, num_heads=2, depth=1), "force")


def test_head_streams_independent():
    a = init_params(SMALL, seed=4, heads=("force",))
    b = init_params(SMALL, seed=4, heads=("force", "pose"))
    for k, v in a.items():
        np.testing.assert_array_equal(v.data, b[k].data)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, seed=5, heads=("force", "pose"))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, SMALL, {"epoch": 3})
    q, cfg, extra = load_checkpoint(path)
    assert cfg == SMALL and extra == {"epoch": 3}
    assert set(q) == set(p)
    for k in p:
        assert q[k].data.tobytes() == p[k].data.tobytes()
    check_params(q, cfg)


def test_input_statistics():
    from posegrf.model import set_input_statistics
    p = init_params(SMALL)
    X = windows(SMALL, 4) * 3.0 + 1.0
    X[..., 0] = 0.25  # a constant coordinate keeps unit gain
    set_input_statistics(p, SMALL, X)
    z = (X.reshape(-1, 17, 2) - p["input.shift"].data) * p["input.gain"].data
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0)[1:], 1.0, atol=1e-12)
    assert p["input.gain"].data[0, 0] == 1.0


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_params(TINY), TINY)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"garbage" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_predict_matches_forward():
    p = init_params(SMALL, seed=2)
    X = windows(SMALL, 5)
    np.testing.assert_allclose(predict(p, SMALL, X, batch_size=2), forward(p, SMALL, X).data, atol=1e-12)


def test_dropout_hook():
    cfg = ModelConfig(joints=3, channels=2, receptive_field=3, embed_dim=4, num_heads=2, depth=1, dropout=0.5)
    p = init_params(cfg)
    X = windows(cfg)
    plain = forward(p, cfg, X).data
    dropped = forward(p, cfg, X, training=True, rng=np.random.default_rng(0)).data
    assert not np.allclose(plain, dropped)
    with pytest.raises(ValueError):
        forward(p, cfg, X, training=True)
