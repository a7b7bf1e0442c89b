import numpy as np
import pytest

from conftest import randomize_all
from tsexperts.data import make_rng
from tsexperts.errors import ShapeError
from tsexperts.evaluate import expected_adapter_params, expected_router_params
from tsexperts.model import (
    AdaptedLinear,
    DenoiserModel,
    ForwardCache,
    LoRAAdapter,
    Mode,
    Router,
    denoising_loss,
    lora_delta,
    pool_tokens,
    router_gate,
)
from tsexperts.numerics import finite_diff_check, loss_and_grads
from tsexperts.schedule import ScaleSet, interval_index

MODES = [Mode.base(), Mode.fostering(8), Mode.fostering(1), Mode.assembled()]


def batch(rng, n=16, T=1000):
    return rng.normal(size=(n, 2)) * 3, rng.integers(1, T + 1, size=n)


def test_lora_delta_examples():
    A = np.array([[1.0, 2.0]])
    B = np.array([[3.0], [4.0]])
    assert np.array_equal(lora_delta(A, B, 1.0), [[3.0, 6.0], [4.0, 8.0]])
    assert np.array_equal(lora_delta(A, np.zeros((2, 1)), 1.0), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        lora_delta(np.ones((2, 3)), np.ones((4, 3)), 1.0)


def test_lora_scaling_one_when_alpha_equals_rank(rng):
    A = rng.normal(size=(4, 6))
    B = rng.normal(size=(5, 4))
    adapter = LoRAAdapter(A, B, alpha=4.0)
    assert adapter.scaling == 1.0
    assert np.array_equal(adapter.delta(), B @ A)
    assert np.allclose(lora_delta(A, B, 8.0), 2 * (B @ A))


def test_router_gate_examples():
    zero = Router(np.zeros((1, 2)), np.zeros(1), np.zeros((10, 1)))
    assert np.array_equal(router_gate(zero, np.array([[2.0], [7.0]]), 3), [0.0])
    r = Router(np.array([[1.0, 0.0]]), np.array([0.0]), np.zeros((10, 1)))
    r.E[4] = 0.5
    assert np.array_equal(router_gate(r, np.array([[2.0], [7.0]]), 5), [2.5])
    with pytest.raises(ValueError):
        router_gate(r, np.array([[2.0], [7.0]]), 11)


def test_pool_tokens_single_token_identity(rng):
    z = rng.normal(size=(5, 1))
    assert np.array_equal(pool_tokens(z), z[:, 0])
    z3 = rng.normal(size=(5, 3))
    assert np.allclose(pool_tokens(z3), z3.mean(axis=1))


def test_fresh_adapters_leave_every_mode_bit_identical(expert_model, rng):
    x, t = batch(rng)
    ref = expert_model.forward(x, t, mode=Mode.base())
    for mode in MODES:
        assert np.array_equal(expert_model.forward(x, t, mode=mode), ref)


def test_forward_is_deterministic(expert_model, rng):
    randomize_all(expert_model, rng)
    x, t = batch(rng)
    for mode in MODES:
        assert np.array_equal(expert_model.forward(x, t, mode=mode), expert_model.forward(x, t, mode=mode))


def test_zero_gates_reproduce_core_expert_exactly(expert_model, rng):
    randomize_all(expert_model, rng)
    for name in expert_model.router_names():
        expert_model.params[name][...] = 0.0
    x, t = batch(rng)
    assert np.array_equal(
        expert_model.forward(x, t, mode=Mode.assembled()), expert_model.forward(x, t, mode=Mode.fostering(8))
    )


def test_context_experts_act_only_through_gates(expert_model, rng):
    randomize_all(expert_model, rng)
    for name in expert_model.router_names():
        expert_model.params[name][...] = 0.0
    x, t = batch(rng)
    before = expert_model.forward(x, t, mode=Mode.assembled())
    for name in expert_model.expert_names(1):
        expert_model.params[name][...] = rng.normal(size=expert_model.params[name].shape)
    assert np.array_equal(expert_model.forward(x, t, mode=Mode.assembled()), before)


def _layer_output(layer: AdaptedLinear, weight, z):
    return weight @ z + layer.bias


@pytest.mark.parametrize("trial", range(10))
def test_merged_weights_match_two_path(expert_model, trial):
    rng = np.random.default_rng(trial)
    randomize_all(expert_model, rng)
    layer = expert_model.hidden[1]
    for _ in range(10):
        z = rng.normal(size=layer.k)
        t = int(rng.integers(1, 1001))
        tt = np.array([t])
        merged = _layer_output(layer, layer.effective_weight_fostering(t, 8), z)
        two_path = layer.forward(z[None], tt, Mode.fostering(8), None)[0]
        assert np.max(np.abs(merged - two_path)) < 1e-10
        merged = _layer_output(layer, layer.effective_weight_assembled(z[:, None], t), z)
        two_path = layer.forward(z[None], tt, Mode.assembled(), None)[0]
        assert np.max(np.abs(merged - two_path)) < 1e-10


def test_effective_weight_fostering_constant_within_interval(expert_model, rng):
    randomize_all(expert_model, rng)
    layer = expert_model.hidden[0]
    assert np.array_equal(layer.effective_weight_fostering(130, 8), layer.effective_weight_fostering(250, 8))
    assert not np.array_equal(layer.effective_weight_fostering(125, 8), layer.effective_weight_fostering(126, 8))


def test_effective_weight_fostering_zero_b_is_base(expert_model):
    layer = expert_model.hidden[0]
    assert np.array_equal(layer.effective_weight_fostering(500, 8), layer.W)


def test_assembled_weight_is_linear_in_deltas(expert_model, rng):
    layer = expert_model.hidden[0]
    D = rng.normal(size=(layer.d, layer.k))
    t = 300
    # make both active adapters produce delta D, and the gate exactly one
    for n, i in ((8, interval_index(t, 1000, 8)), (1, 1)):
        a = layer.adapter(n, i)
        a.A[...] = D[:4]
        a.B[...] = 0.0
        a.B[:4, :4] = np.eye(4)
    D = layer.adapter(8, 3).delta()
    assert np.array_equal(D, layer.adapter(1, 1).delta())
    layer.router.Fb[...] = 1.0
    z = np.zeros((layer.k, 1))
    assert np.allclose(layer.effective_weight_assembled(z, t), layer.W + 2 * D, atol=1e-14)


def test_zero_router_assembled_weight_equals_core(expert_model, rng):
    randomize_all(expert_model, rng)
    layer = expert_model.hidden[2]
    for name in expert_model.router_names():
        expert_model.params[name][...] = 0.0
    z = rng.normal(size=(layer.k, 1))
    assert np.array_equal(layer.effective_weight_assembled(z, 777), layer.effective_weight_fostering(777, 8))


def test_single_scale_assembly_is_core_only(rng):
    m = DenoiserModel(rng=make_rng(0, "init"))
    m.attach_experts(ScaleSet((4,)), 4, 4.0, make_rng(0, "lora"))
    m.attach_routers()
    assert m.router_names() == []
    randomize_all(m, rng)
    x, t = batch(rng)
    assert np.array_equal(m.forward(x, t, mode=Mode.assembled()), m.forward(x, t, mode=Mode.fostering(4)))


def test_router_scale_mismatch_rejected(expert_model):
    layer = expert_model.hidden[0]
    p = f"{layer.name}.router.F"
    del expert_model.params.tensors[p]
    expert_model.params.tensors[p] = np.zeros((2, layer.k))
    with pytest.raises(ShapeError):
        layer.effective_weight_assembled(np.zeros((layer.k, 1)), 5)


def test_missing_bank_rejected(model):
    with pytest.raises(ValueError):
        model.hidden[0].effective_weight_fostering(3, 8)
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 2)), 3, mode=Mode.fostering(8))


def test_assembled_mode_requires_router(rng):
    m = DenoiserModel(rng=make_rng(0, "init"))
    m.attach_experts(ScaleSet((8, 1)), 4, 4.0, make_rng(0, "lora"))
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 2)), 3, mode=Mode.assembled())


def test_expert_locality_over_all_timesteps():
    T = 40
    rng = np.random.default_rng(3)
    m = DenoiserModel(T=T, rng=make_rng(0, "init"))
    m.attach_experts(ScaleSet((8, 4)), 4, 4.0, make_rng(0, "lora"))
    randomize_all(m, rng)
    x = rng.normal(size=(1, 2))
    ts = np.arange(1, T + 1)
    for n in (8, 4):
        xs = np.repeat(x, T, axis=0)
        before = m.forward(xs, ts, mode=Mode.fostering(n))
        for i in range(1, n + 1):
            B = m.hidden[1].adapter(n, i).B
            saved = B.copy()
            B += 0.5
            after = m.forward(xs, ts, mode=Mode.fostering(n))
            B[...] = saved
            changed = np.any(after != before, axis=1)
            assert np.array_equal(changed, interval_index(ts, T, n) == i)


def test_gate_table_gradient_only_on_active_rows(expert_model, rng, sched):
    randomize_all(expert_model, rng)
    expert_model.params.only_trainable(expert_model.router_names())
    x0, _ = batch(rng, 3)
    t = np.array([17, 17, 903])
    eps = rng.normal(size=x0.shape)
    loss_fn = denoising_loss(expert_model, x0, t, eps, sched, mode=Mode.assembled())
    _, grads = loss_and_grads(loss_fn, expert_model.params)
    for layer in expert_model.hidden:
        dE = grads[f"{layer.name}.router.E"]
        nonzero = set(np.flatnonzero(np.any(dE != 0, axis=1)) + 1)
        assert nonzero == {17, 903}


def test_parameter_accounting(expert_model):
    assert expert_model.adapter_param_count() == expected_adapter_params(expert_model, 4, 9)
    assert expert_model.adapter_param_count() == 3 * 9 * 4 * (64 + 64)
    assert expert_model.router_param_count() == expected_router_params(expert_model, 2)
    assert expert_model.router_param_count() == 3 * (1 * 65 + 1000 * 1)
    assert expert_model.router_param_count() < expert_model.adapter_param_count()


def test_b_zero_and_e_zero_at_creation(expert_model):
    for name in expert_model.expert_names():
        if name.endswith(".B"):
            assert not np.any(expert_model.params[name])
        else:
            assert np.any(expert_model.params[name])
    for name in expert_model.router_names():
        assert not np.any(expert_model.params[name])


def test_rank_limit_enforced():
    m = DenoiserModel(width=8, rng=make_rng(0, "init"))
    with pytest.raises(ValueError):
        m.attach_experts(ScaleSet((2,)), 5, 5.0, make_rng(0, "lora"))


def test_mode_parse_roundtrip():
    for mode in MODES:
        assert Mode.parse(str(mode)) == mode
    with pytest.raises(ValueError):
        Mode.parse("fostering")
    with pytest.raises(ValueError):
        Mode("mixture")


def test_nonfinite_activation_names_layer(model):
    model.params["h1.W"][0, 0] = np.inf
    with pytest.raises(Exception, match="h1"):
        model.forward(np.ones((1, 2)), 5)


def test_cache_records_inputs_and_gates(expert_model, rng):
    randomize_all(expert_model, rng)
    x, t = batch(rng, 4)
    cache = ForwardCache()
    expert_model.forward(x, t, mode=Mode.assembled(), cache=cache)
    assert set(cache.gates) == {"h0", "h1", "h2"}
    assert cache.gates["h0"].shape == (4, 1)
    assert len(cache.hidden) == 4


@pytest.mark.parametrize("mode,names", [
    (Mode.base(), "base"),
    (Mode.fostering(8), "experts8"),
    (Mode.assembled(), "routers"),
])
def test_denoising_loss_finite_differences(mode, names, sched):
    rng = np.random.default_rng(11)
    m = DenoiserModel(width=16, depth=2, time_dim=8, n_classes=3, rng=make_rng(0, "init"))
    m.attach_experts(ScaleSet((4, 1)), 2, 2.0, make_rng(0, "lora"))
    m.attach_routers()
    randomize_all(m, rng)
    sel = {"base": m.base_names(), "experts8": m.expert_names(4), "routers": m.router_names() + m.expert_names(1)}[names]
    mode = Mode.fostering(4) if mode.kind == "fostering" else mode
    m.params.only_trainable(sel)
    x0 = rng.normal(size=(5, 2))
    t = rng.integers(1, 1001, size=5)
    eps = rng.normal(size=(5, 2))
    c = rng.integers(0, 3, size=5)
    assert finite_diff_check(denoising_loss(m, x0, t, eps, sched, c, mode), m.params, 1e-5) < 1e-4


def test_sinusoidal_embedding_distinguishes_timesteps():
    from tsexperts.model import timestep_embedding

    e = timestep_embedding(np.arange(1, 1001), 32)
    assert e.shape == (1000, 32)
    assert len({row.tobytes() for row in e}) == 1000


def test_model_with_adapted_io_layers(rng):
    m = DenoiserModel(data_dim=64, adapt_io=True, rng=make_rng(0, "init"))
    m.attach_experts(ScaleSet((2, 1)), 4, 4.0, make_rng(0, "lora"))
    m.attach_routers()
    assert [l.name for l in m.adapted_layers] == ["in", "h0", "h1", "h2", "out"]
    x = rng.normal(size=(3, 64))
    assert np.array_equal(m.forward(x, 9, mode=Mode.assembled()), m.forward(x, 9))
