import tracemalloc

import numpy as np
import pytest

from rangepilot import binfmt
from rangepilot.deploy import (LayoutMismatchError, bench_latency, export_bytes, export_model, load_bytes,
                               load_model)
from rangepilot.physics import Mode
from rangepilot.policy import forward, init_model


def _model(mode=Mode.HELICOPTER, seed=0, **kw):
    return init_model(np.random.default_rng(seed), mode=int(mode), log_std_init=-0.5,
                      bounds_min=[-30, -30, 0], bounds_max=[30, 30, 60], policy_scale=1.0, **kw)


@pytest.fixture(scope="module")
def heli():
    return _model()


@pytest.fixture(scope="module")
def obs():
    return np.random.default_rng(4).uniform(-1, 1, (1000, 72)).astype(np.float32)


class TestParity:
    def test_raw_outputs_match_trainer(self, heli, obs):
        sess = load_bytes(export_bytes(heli)).session()
        mu, _, v = forward(heli, obs)
        got = np.array([sess.forward(o).copy() for o in obs])
        np.testing.assert_allclose(got[:, :5], mu, atol=1e-6)
        np.testing.assert_allclose(got[:, 5], v, atol=1e-6)

    def test_actions_are_clamped_means(self, obs):
        m = _model(Mode.ZERO_G)
        im = load_bytes(export_bytes(m))
        mu, _, _ = forward(m, obs)
        got = np.array([im.infer(o).copy() for o in obs])
        np.testing.assert_allclose(got, np.clip(mu, -1, 1), atol=1e-6)
        assert (np.abs(mu) > 1).any()  # clamp actually exercised

    def test_stripped_export(self, heli, obs):
        full, stripped = export_bytes(heli), export_bytes(heli, strip_value=True)
        assert len(stripped) < len(full)
        a, b = load_bytes(full), load_bytes(stripped)
        assert not b.has_value and b.dims == (72, 512, 256, 5)
        assert a.dims == (72, 512, 256, 6)
        for o in obs[:50]:
            np.testing.assert_array_equal(a.infer(o), b.infer(o))

    def test_metadata_survives(self, heli):
        im = load_bytes(export_bytes(heli))
        assert im.mode == Mode.HELICOPTER and im.stack_size == heli.stack_size
        np.testing.assert_array_equal(im.bounds_max, [30, 30, 60])

    def test_export_is_bit_stable(self, heli, tmp_path):
        p1, p2 = tmp_path / "a.apml", tmp_path / "b.apml"
        n = export_model(heli, p1)
        export_model(heli.copy(), p2)
        assert n == p1.stat().st_size
        assert p1.read_bytes() == p2.read_bytes()
        assert load_model(p1).dims == (72, 512, 256, 6)


class TestFire:
    @pytest.mark.parametrize("mu_fire,expected", [(0.49, 0.0), (0.5, 1.0), (0.51, 1.0), (-3.0, 0.0), (7.0, 1.0)])
    def test_threshold(self, heli, mu_fire, expected):
        m = heli.copy()
        m.params["Wmu"][:, 4] = 0.0
        m.params["bmu"][4] = mu_fire
        assert load_bytes(export_bytes(m)).infer(np.zeros(72, np.float32))[4] == expected

    def test_zero_g_has_no_fire_rule(self):
        m = _model(Mode.ZERO_G)
        m.params["Wmu"][:, 4] = 0.0
        m.params["bmu"][4] = 0.3
        assert load_bytes(export_bytes(m)).infer(np.zeros(72, np.float32))[4] == pytest.approx(0.3)


class TestFormatErrors:
    def test_tamper(self, heli):
        data = bytearray(export_bytes(heli))
        data[len(data) // 2] ^= 0x10
        with pytest.raises(binfmt.ChecksumError):
            load_bytes(bytes(data))

    def test_truncated(self, heli):
        data = export_bytes(heli)
        with pytest.raises(binfmt.TruncatedError):
            load_bytes(data[:-7])

    def test_version(self, heli):
        data = bytearray(export_bytes(heli))
        data[4] = 9
        with pytest.raises(binfmt.VersionError):
            load_bytes(bytes(data))

    def test_magic(self, heli):
        with pytest.raises(binfmt.BadMagicError):
            load_bytes(b"XXXX" + export_bytes(heli)[4:])

    def test_layout_mismatch(self):
        m = _model(obs_layout_version=99)
        with pytest.raises(LayoutMismatchError):
            load_bytes(export_bytes(m))
        assert load_bytes(export_bytes(m), expected_layout=None).obs_layout_version == 99

    def test_weights_are_read_only(self, heli):
        im = load_bytes(export_bytes(heli))
        with pytest.raises(ValueError):
            im.layers[0][0][0, 0] = 1.0


class TestRuntime:
    def test_repeated_calls_identical(self, heli, obs):
        sess = load_bytes(export_bytes(heli)).session()
        first = sess.infer(obs[0]).copy()
        for _ in range(100):
            np.testing.assert_array_equal(sess.infer(obs[0]), first)

    def test_sessions_are_independent(self, heli, obs):
        im = load_bytes(export_bytes(heli))
        a, b = im.session(), im.session()
        ra = a.infer(obs[0]).copy()
        b.infer(obs[1])
        np.testing.assert_array_equal(a.infer(obs[0]), ra)

    def test_no_per_call_allocation(self, heli, obs):
        sess = load_bytes(export_bytes(heli)).session()
        x = obs[0]
        sess.infer(x)
        smallest_layer = 256 * 4  # a single hidden activation in float32
        tracemalloc.start()
        try:
            before, _ = tracemalloc.get_traced_memory()
            tracemalloc.reset_peak()
            for _ in range(5000):
                sess.infer(x)
            after, peak = tracemalloc.get_traced_memory()
            # the trainer path allocates activations; the instrument must see that
            tracemalloc.reset_peak()
            base2, _ = tracemalloc.get_traced_memory()
            forward(heli, x)
            _, peak2 = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        assert peak2 - base2 > smallest_layer
        assert peak - before < smallest_layer
        assert after - before < smallest_layer

    def test_latency_budget(self, heli):
        stats = bench_latency(load_bytes(export_bytes(heli)), iterations=10_000, rounds=5)
        assert stats.p50_us <= stats.p95_us <= stats.p99_us
        assert len(stats.round_p99_us) == 5 and stats.p99_us == sorted(stats.round_p99_us)[2]
        assert stats.p99_us < 100.0, stats

    def test_smaller_model_is_faster(self, heli):
        tiny = init_model(np.random.default_rng(0), obs_dim=4, hidden=(4,), act_dim=2)
        big = bench_latency(load_bytes(export_bytes(heli)), iterations=3000)
        small = bench_latency(load_bytes(export_bytes(tiny)), iterations=3000)
        assert small.p50_us < big.p50_us
