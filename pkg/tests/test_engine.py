import numpy as np
import pytest

from tensorgrid import errors
from tensorgrid.engine import (
    Affine,
    Dense,
    ModelSpec,
    ReLU,
    ScriptSpec,
    Step,
    Tanh,
    dump_model,
    dump_script,
    load_model,
    op_fp,
    op_fp_inv,
    parse_script,
    run_model_exec,
    run_script_exec,
)


def naive_model_oracle(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    """Nested-loop reference in float32 scalars: same precision as the
    engine's fixed f32 accumulation, independent matrix arithmetic."""
    rows = []
    for row in batch:
        x = [np.float32(v) for v in row]
        for layer in spec.layers:
            if isinstance(layer, Dense):
                y = []
                for o in range(layer.out_width):
                    acc = np.float32(0.0)
                    for i in range(layer.in_width):
                        acc = np.float32(acc + np.float32(layer.weights[o, i] * x[i]))
                    y.append(np.float32(acc + layer.bias[o]))
                x = y
            elif isinstance(layer, ReLU):
                x = [max(np.float32(0.0), v) for v in x]
            elif isinstance(layer, Tanh):
                x = [np.float32(np.tanh(v)) for v in x]
            else:
                x = [np.float32(v * np.float32(layer.scale) + np.float32(layer.shift)) for v in x]
        rows.append(x)
    return np.array(rows, dtype=np.float32)


def random_mlp(rng, max_dense=3, max_width=16) -> ModelSpec:
    widths = [int(rng.integers(1, max_width + 1)) for _ in range(rng.integers(1, max_dense + 1) + 1)]
    layers = []
    for a, b in zip(widths, widths[1:]):
        layers.append(
            Dense(a, b, rng.normal(0, 1, (b, a)).astype(np.float32),
                  rng.normal(0, 1, b).astype(np.float32))
        )
        kind = rng.integers(0, 3)
        if kind == 1:
            layers.append(ReLU())
        elif kind == 2:
            layers.append(Tanh())
    return ModelSpec("rnd", tuple(layers))


class TestModelExec:
    def test_dense_hand_oracle(self):
        m = ModelSpec("m", (Dense(1, 1, [[2.0]], [1.0]),))
        out = run_model_exec(m, np.array([[3.0]], dtype=np.float32))
        assert out.tolist() == [[7.0]]  # 2*3 + 1

    def test_relu(self):
        m = ModelSpec("m", (ReLU(),))
        out = run_model_exec(m, np.array([[-1.0, 2.0]], dtype=np.float32))
        assert out.tolist() == [[0.0, 2.0]]

    def test_identity_affine(self):
        m = ModelSpec("m", (Affine(1.0, 0.0),))
        x = np.random.default_rng(3).normal(0, 1, (4, 5)).astype(np.float32)
        np.testing.assert_array_equal(run_model_exec(m, x), x)

    def test_rejects_f64(self):
        m = ModelSpec("m", (Affine(1.0, 0.0),))
        with pytest.raises(errors.DTypeMismatch):
            run_model_exec(m, np.zeros((1, 1)))

    def test_rejects_wrong_width(self):
        m = ModelSpec("m", (Dense(3, 2, np.zeros((2, 3)), np.zeros(2)),))
        with pytest.raises(errors.WidthMismatch):
            run_model_exec(m, np.zeros((1, 4), dtype=np.float32))

    def test_oracle_equivalence_100_random(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            spec = random_mlp(rng)
            width = spec.input_width
            batch = rng.normal(0, 1, (int(rng.integers(1, 8)), width)).astype(np.float32)
            got = run_model_exec(spec, batch)
            want = naive_model_oracle(spec, batch)
            denom = np.maximum(np.abs(want), np.float32(1e-30))
            worst = max(worst, float(np.max(np.abs(got - want) / denom)))
        assert worst <= 1e-6, worst

    def test_row_independence(self):
        # the bitwise foundation of batching transparency
        rng = np.random.default_rng(7)
        spec = random_mlp(rng)
        batch = rng.normal(0, 1, (16, spec.input_width)).astype(np.float32)
        whole = run_model_exec(spec, batch)
        for i in range(16):
            single = run_model_exec(spec, batch[i : i + 1])
            assert single.tobytes() == whole[i : i + 1].tobytes()

    def test_partition_invariance(self):
        rng = np.random.default_rng(11)
        spec = random_mlp(rng)
        batch = rng.normal(0, 1, (12, spec.input_width)).astype(np.float32)
        whole = run_model_exec(spec, batch)
        for split in ([4, 4, 4], [1, 11], [6, 6], [12]):
            parts = []
            at = 0
            for n in split:
                parts.append(run_model_exec(spec, batch[at : at + n]))
                at += n
            assert np.concatenate(parts).tobytes() == whole.tobytes()

    def test_determinism(self):
        rng = np.random.default_rng(13)
        spec = random_mlp(rng)
        batch = rng.normal(0, 1, (5, spec.input_width)).astype(np.float32)
        assert run_model_exec(spec, batch).tobytes() == run_model_exec(spec, batch).tobytes()


class TestModelBlob:
    def test_roundtrip(self):
        rng = np.random.default_rng(5)
        spec = ModelSpec(
            "m",
            (
                Dense(3, 4, rng.normal(0, 1, (4, 3)).astype(np.float32),
                      rng.normal(0, 1, 4).astype(np.float32)),
                Tanh(),
                Affine(0.5, -1.0),
                Dense(4, 2, rng.normal(0, 1, (2, 4)).astype(np.float32),
                      rng.normal(0, 1, 2).astype(np.float32)),
                ReLU(),
            ),
        )
        back = load_model(dump_model(spec))
        x = rng.normal(0, 1, (3, 3)).astype(np.float32)
        assert run_model_exec(back, x).tobytes() == run_model_exec(spec, x).tobytes()

    def test_single_dense(self):
        blob = dump_model(ModelSpec("m", (Dense(1, 1, [[2.0]], [1.0]),)))
        spec = load_model(blob)
        assert len(spec.layers) == 1
        assert spec.input_width == 1

    def test_dim_mismatch(self):
        with pytest.raises(errors.DimMismatch):
            ModelSpec(
                "bad",
                (
                    Dense(2, 3, np.zeros((3, 2)), np.zeros(3)),
                    Dense(4, 1, np.zeros((1, 4)), np.zeros(1)),
                ),
            )

    def test_wrong_magic(self):
        with pytest.raises(errors.BadMagic):
            load_model(b"NOPE" + b"\x00" * 8)

    def test_wrong_version(self):
        blob = bytearray(dump_model(ModelSpec("m", (ReLU(),))))
        blob[4] = 9
        with pytest.raises(errors.BadVersion):
            load_model(bytes(blob))

    def test_truncated(self):
        blob = dump_model(ModelSpec("m", (Dense(2, 2, np.ones((2, 2)), np.ones(2)),)))
        with pytest.raises(errors.Truncated):
            load_model(blob[:-3])


class TestScriptExec:
    def _script(self, steps, arity=1, finalize="single"):
        return ScriptSpec("s", arity, tuple(steps), finalize)

    def test_ln_of_e(self):
        out = run_script_exec(self._script([Step(0, "ln")]), [np.array([np.e])])
        np.testing.assert_allclose(out, [1.0], rtol=1e-15)

    def test_stack_shape(self):
        s = self._script([], arity=4, finalize="stack")
        inputs = [np.zeros(5) + i for i in range(4)]
        out = run_script_exec(s, inputs)
        assert out.shape == (5, 4)
        np.testing.assert_array_equal(out[0], [0, 1, 2, 3])

    def test_affine(self):
        out = run_script_exec(
            self._script([Step(0, "affine", {"a": 2.0, "b": 1.0})]), [np.array([3.0])]
        )
        assert out.tolist() == [7.0]

    def test_arity_mismatch(self):
        with pytest.raises(errors.ArityMismatch):
            run_script_exec(self._script([], arity=4, finalize="stack"), [np.zeros(2)] * 3)

    def test_shape_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            run_script_exec(self._script([], arity=2, finalize="stack"),
                            [np.zeros(2), np.zeros(3)])

    def test_ln_domain_error(self):
        with pytest.raises(errors.DomainError):
            run_script_exec(self._script([Step(0, "ln")]), [np.array([0.0])])

    def test_standardize_zero_std_rejected_at_exec(self):
        s = self._script([Step(0, "standardize", {"mean": 0.0, "std": 1.0})])
        out = run_script_exec(s, [np.array([2.0])])
        assert out.tolist() == [2.0]

    def test_exp_ln_identity(self):
        s = self._script([Step(0, "ln"), Step(0, "exp")])
        x = np.abs(np.random.default_rng(0).normal(2, 1, 64)) + 0.1
        out = run_script_exec(s, [x])
        np.testing.assert_allclose(out, x, rtol=1e-12)

    def test_all_target(self):
        s = self._script([Step("all", "affine", {"a": 0.0, "b": 5.0})], arity=2, finalize="stack")
        out = run_script_exec(s, [np.zeros(3), np.ones(3)])
        assert np.all(out == 5.0)

    def test_clamp(self):
        s = self._script([Step(0, "clamp", {"lo": -1.0, "hi": 1.0})])
        out = run_script_exec(s, [np.array([-5.0, 0.5, 5.0])])
        assert out.tolist() == [-1.0, 0.5, 1.0]

    def test_preserves_dtype(self):
        s = self._script([Step(0, "affine", {"a": 1.0, "b": 0.0})])
        assert run_script_exec(s, [np.zeros(2, dtype=np.float32)]).dtype == np.float32
        assert run_script_exec(s, [np.zeros(2)]).dtype == np.float64


class TestScriptBlob:
    def test_roundtrip(self):
        spec = ScriptSpec(
            "pipeline",
            4,
            (Step(0, "ln"), Step(2, "fp", {"c": 36.0}), Step("all", "affine", {"a": 1.0, "b": 0.0})),
            "stack",
        )
        assert parse_script(dump_script(spec)) == spec

    def test_rejects_bad_json(self):
        with pytest.raises(errors.BadScript):
            parse_script(b"not json")

    def test_rejects_unknown_op(self):
        with pytest.raises(errors.BadScript):
            parse_script(b'{"name":"s","arity":1,"steps":[{"target":0,"op":"sqrt"}],"finalize":"single"}')

    def test_rejects_target_out_of_range(self):
        with pytest.raises(errors.BadScript):
            parse_script(b'{"name":"s","arity":1,"steps":[{"target":1,"op":"ln"}],"finalize":"single"}')

    def test_rejects_single_with_arity_2(self):
        with pytest.raises(errors.BadScript):
            parse_script(b'{"name":"s","arity":2,"steps":[],"finalize":"single"}')

    def test_rejects_zero_std(self):
        with pytest.raises(errors.BadScript):
            parse_script(
                b'{"name":"s","arity":1,"steps":[{"target":0,"op":"standardize","mean":0,"std":0}],'
                b'"finalize":"single"}'
            )


class TestFpOps:
    def test_fp_inv_roundtrip_f64(self):
        x = np.concatenate([np.geomspace(1e-15, 1e6, 200), -np.geomspace(1e-15, 1e6, 200)])
        y = op_fp(x, 36.0)
        back = op_fp_inv(y, 36.0)
        np.testing.assert_allclose(back, x, rtol=1e-12)

    def test_fp_inv_gap_is_domain_error(self):
        # image of |x| >= 1e-15 under fp(., 36) starts at 36 + ln(1e-15) ~ 1.46
        with pytest.raises(errors.DomainError):
            op_fp_inv(np.array([1.0]), 36.0)
        with pytest.raises(errors.DomainError):
            op_fp_inv(np.array([-0.5]), 36.0)

    def test_fp_inv_at_gap_edges(self):
        np.testing.assert_allclose(op_fp_inv(np.array([36.0]), 36.0), [1.0], rtol=1e-15)
        assert op_fp_inv(np.array([10.0]), 36.0)[0] == pytest.approx(np.exp(-26.0), rel=1e-15)

    def test_fp_zero(self):
        assert op_fp(np.array([0.0]), 36.0).tolist() == [0.0]
