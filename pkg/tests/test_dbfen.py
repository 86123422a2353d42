import numpy as np
import pytest

from active.dbfen import (
    DBFEN,
    DbfenConfig,
    MBCBlock,
    ResidualBlock,
    SEBlock,
    dbfen_forward,
    drop_connect,
    mbcb_block,
    residual_block,
    se_block,
)
from active.tensor import ShapeError, Tensor, add, backward, check_gradients, dot_all

from gradtools import he_rescale, measurable_indices

SEEDS = range(20)
TOL = 1e-4
EPS = 1e-6

# widths <= 8 so the end-to-end check stays cheap
TINY = DbfenConfig(stem_channels=4, widths=(4, 6, 8), expansion_ratio=2, drop_prob=0.0, se_reduction=2)


def _x(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _sample(rng, t, k=6):
    flat = rng.choice(t.data.size, size=min(k, t.data.size), replace=False)
    return [np.unravel_index(i, t.shape) for i in flat]


def _max_err(fn, params, rng, k=6, eps=1e-6):
    return max(check_gradients(fn, p, eps=eps, indices=_sample(rng, p, k)) for p in params)


class TestConfig:
    def test_name(self):
        assert DbfenConfig.named(3, 6).name == "DBFEN3-6"
        assert DbfenConfig().name == "DBFEN3-3"

    def test_named_spreads_blocks(self):
        cfg = DbfenConfig.named(7, 4)
        assert sum(cfg.blocks_per_stage_branch1) == 7
        assert sum(cfg.blocks_per_stage_branch2) == 4
        with pytest.raises(ValueError):
            DbfenConfig.named(2, 3)  # every stage needs a block

    @pytest.mark.parametrize("bad", [dict(widths=(8, 16)), dict(widths=(7, 16, 32)), dict(drop_prob=1.0),
                                     dict(blocks_per_stage_branch1=(0, 1, 1)), dict(expansion_ratio=0)])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            DbfenConfig(**bad)


class TestShapes:
    def test_pyramid_shapes_416(self):
        net = DBFEN(DbfenConfig.micro(), np.random.default_rng(0), np.float32)
        pyr = dbfen_forward(Tensor(np.zeros((1, 3, 416, 416), np.float32)), net)
        for i in (1, 2):
            assert pyr[(i, 1)].shape == (1, 32, 13, 13)
            assert pyr[(i, 2)].shape == (1, 16, 26, 26)
            assert pyr[(i, 3)].shape == (1, 8, 52, 52)

    def test_rejects_bad_input(self):
        net = DBFEN(TINY, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            dbfen_forward(Tensor(np.zeros((1, 1, 32, 32))), net)
        with pytest.raises(ShapeError):
            dbfen_forward(Tensor(np.zeros((1, 3, 48, 48))), net)

    def test_residual_block_shapes(self):
        rng = np.random.default_rng(0)
        down = ResidualBlock(rng, 4, 8, downsample=True)
        assert residual_block(Tensor(rng.normal(size=(2, 4, 8, 8))), down).shape == (2, 8, 4, 4)
        same = ResidualBlock(rng, 8, 8, downsample=False)
        assert residual_block(Tensor(rng.normal(size=(2, 8, 4, 4))), same).shape == (2, 8, 4, 4)
        with pytest.raises(ShapeError):
            residual_block(Tensor(rng.normal(size=(1, 4, 5, 5))), down)

    def test_mbcb_expansion(self):
        rng = np.random.default_rng(0)
        blk = MBCBlock(rng, 4, 8, stride=2, expansion=4, drop_prob=0.0, se_reduction=4)
        assert blk.expanded_width == 16
        assert blk.expand is not None
        assert mbcb_block(Tensor(rng.normal(size=(1, 4, 8, 8))), blk).shape == (1, 8, 4, 4)
        plain = MBCBlock(rng, 4, 4, stride=1, expansion=1, drop_prob=0.0, se_reduction=4)
        assert plain.expand is None  # expansion 1 skips the 1x1 expand conv

    def test_se_reduction_floor(self):
        blk = SEBlock(np.random.default_rng(0), 3, 8)
        assert blk.reduce.weight.shape[0] == 1


class TestSE:
    def test_gate_is_in_unit_interval(self):
        rng = np.random.default_rng(0)
        blk = SEBlock(rng, 6, 2)
        x = rng.normal(size=(2, 6, 5, 5))
        out = se_block(Tensor(x), blk).data
        gate = out / x
        assert ((gate > 0) & (gate < 1)).all()
        # one gate value per (sample, channel)
        np.testing.assert_allclose(gate, gate[:, :, :1, :1] * np.ones_like(gate), rtol=1e-10)


class TestDropConnect:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.ones((4, 2, 3, 3)))
        assert drop_connect(x, 0.5, training=False, rng=None) is x

    def test_training_needs_rng(self):
        with pytest.raises(ValueError):
            drop_connect(Tensor(np.ones((1, 1, 1, 1))), 0.5, training=True, rng=None)

    @pytest.mark.parametrize("p", [0.2, 0.5])
    def test_drop_rate_monte_carlo(self, p):
        # 10k samples: the zeroed fraction matches p within 5% relative and the mean is preserved
        x = Tensor(np.ones((10_000, 1, 1, 1)))
        out = drop_connect(x, p, training=True, rng=np.random.default_rng(0)).data.ravel()
        dropped = np.mean(out == 0)
        assert abs(dropped - p) / p < 0.05
        np.testing.assert_allclose(out[out != 0], 1 / (1 - p))
        assert abs(out.mean() - 1.0) < 0.05

    def test_whole_samples_dropped(self):
        x = Tensor(np.ones((64, 3, 2, 2)))
        out = drop_connect(x, 0.5, training=True, rng=np.random.default_rng(1)).data
        per_sample = out.reshape(64, -1)
        assert (per_sample.min(axis=1) == per_sample.max(axis=1)).all()


@pytest.mark.gradcheck
class TestGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_residual_block(self, seed):
        rng = np.random.default_rng(seed)
        downsample = seed % 2 == 0
        blk = ResidualBlock(rng, 4 if downsample else 8, 8, downsample)
        he_rescale(blk, rng)
        x = _x(rng, 2, 4 if downsample else 8, 6, 6)
        proj = rng.normal(size=blk(x).shape)
        params = [x] + blk.parameters()
        assert _max_err(lambda: dot_all(blk(x), proj), params, rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mbcb_with_se(self, seed):
        rng = np.random.default_rng(seed)
        stride = 1 if seed % 2 else 2
        blk = MBCBlock(rng, 4, 4, stride=stride, expansion=2, drop_prob=0.3, se_reduction=2)
        he_rescale(blk, rng)
        x = _x(rng, 2, 4, 6, 6)
        proj = rng.normal(size=blk(x).shape)
        mask_seed = seed + 1000

        def fn():
            # replaying the same drop-connect mask keeps the function deterministic
            return dot_all(blk(x, training=True, rng=np.random.default_rng(mask_seed)), proj)

        assert _max_err(fn, [x] + blk.parameters(), rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_full_backbone(self, seed):
        rng = np.random.default_rng(seed)
        net = DBFEN(TINY, rng)
        he_rescale(net, rng)
        x = _x(rng, 1, 3, 32, 32)
        pyr = dbfen_forward(x, net)
        keys = [(i, j) for i in (1, 2) for j in (1, 2, 3)]
        projs = {k: rng.normal(size=pyr[k].shape) for k in keys}

        def fn():
            p = dbfen_forward(x, net)
            return add([dot_all(p[k], projs[k]) for k in keys])

        named = list(net.named_parameters())
        picks = [named[i][1] for i in rng.choice(len(named), size=4, replace=False)]
        backward(fn())
        scale = sum(np.abs(pyr[k].data * projs[k]).sum() for k in keys)
        checked = 0
        for p in [x] + picks:
            idx = measurable_indices(p, scale, EPS, TOL, 3, rng)
            if idx:
                assert check_gradients(fn, p, eps=EPS, indices=idx) < TOL
                checked += 1
        assert checked >= 3
