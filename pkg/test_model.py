import numpy as np
import pytest

from utils.losses import MAPE, MASE, SMAPE, mape_loss, mase_loss, smape_loss
from utils.model import (
    DRESS,
    GENERIC,
    LAST_FORWARD,
    NO_RESIDUAL,
    PARALLEL,
    RESIDUAL_INPUT,
    SEASONALITY,
    TOPOLOGIES,
    TREND,
    BasisSpec,
    ModelConfig,
    ParamStore,
    block_forward,
    block_layer_shapes,
    forecast,
    init_params,
    make_block_config,
    make_fourier_basis,
    make_trend_basis,
    model_backward,
    model_forward,
    param_shapes,
    preset_generic,
    preset_interpretable,
    tensor_name,
    topology_forward,
)
from utils.ndcore import Rng, ShapeError, grad_check, sample_coords


def test_trend_basis_rows_are_powers_of_time():
    T_back, T_fwd = make_trend_basis(8, 4, 2)
    assert T_back.shape == (8, 3) and T_fwd.shape == (4, 3)
    np.testing.assert_allclose(T_fwd[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(T_fwd[2], [1.0, 0.5, 0.25])
    assert not T_fwd.flags.writeable


def test_fourier_basis_harmonic_count():
    T_back, T_fwd = make_fourier_basis(12, 6)
    # K = floor(len / 2 - 1)
    assert T_back.shape == (12, 11)
    assert T_fwd.shape == (6, 5)
    np.testing.assert_allclose(T_fwd[:, 0], 1.0)
    with pytest.raises(ValueError):
        make_fourier_basis(8, 1)


def test_fixed_basis_blocks_require_natural_theta_sizes():
    block = make_block_config(SEASONALITY, 8, 2, 12, 6)
    assert (block.theta_b_dim, block.theta_f_dim) == (11, 5)
    with pytest.raises(ValueError, match="theta dims"):
        type(block)(8, 2, BasisSpec(TREND, 12, 6, 2), theta_f_dim=4, theta_b_dim=3)


def test_generic_preset_defaults():
    cfg = preset_generic(horizon=6, lookback_multiple=3)
    assert len(cfg.stacks) == 30
    assert cfg.input_len == 18
    block = cfg.stacks[0].block
    assert (block.width, block.fc_layers) == (512, 4)
    assert not cfg.stacks[0].share_weights


def test_interpretable_preset_defaults_and_sharing():
    cfg = preset_interpretable(horizon=6, lookback_multiple=2)
    trend, season = cfg.stacks
    assert trend.block.basis.kind == TREND and trend.block.width == 256 and trend.block.basis.degree == 2
    assert season.block.basis.kind == SEASONALITY and season.block.width == 2048
    assert trend.blocks == season.blocks == 3
    assert trend.share_weights and season.share_weights


def test_interpretable_preset_drops_empty_stacks():
    cfg = preset_interpretable(horizon=6, lookback_multiple=2, t_blocks=0, s_blocks=2, s_width=8)
    assert [s.block.basis.kind for s in cfg.stacks] == [SEASONALITY]


def test_shared_stack_owns_one_block_of_tensors(tiny_interpretable):
    shapes = param_shapes(tiny_interpretable)
    assert all(".block0." in name for name in shapes)
    params = init_params(tiny_interpretable, Rng(0))
    assert params.get(0, 1, "fc0.W") is params.get(0, 0, "fc0.W")


def test_init_params_is_seeded(tiny_generic):
    a = init_params(tiny_generic, Rng(9))
    b = init_params(tiny_generic, Rng(9))
    assert a.equals(b)
    assert not a.equals(init_params(tiny_generic, Rng(10)))
    np.testing.assert_array_equal(a["stack0.block0.fc0.b"], 0.0)


def test_param_store_rejects_wrong_shapes(tiny_generic):
    tensors = {k: np.zeros(v) for k, v in param_shapes(tiny_generic).items()}
    tensors["stack0.block0.fc0.W"] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        ParamStore(tiny_generic, tensors)


def test_config_json_round_trip(tiny_interpretable):
    assert ModelConfig.from_json(tiny_interpretable.to_json()) == tiny_interpretable


def test_with_lookback_resizes_input_and_bases(tiny_interpretable):
    cfg = tiny_interpretable.with_lookback(5)
    assert cfg.input_len == 30
    season = cfg.stacks[1].block
    assert season.basis.backcast_len == 30
    assert season.theta_b_dim == 2 * 14 + 1
    assert cfg.stacks[0].blocks == tiny_interpretable.stacks[0].blocks


def test_model_rejects_wrong_input_length(tiny_generic):
    params = init_params(tiny_generic, Rng(0))
    with pytest.raises(ShapeError, match="length 8"):
        forecast(np.zeros((2, 7)), tiny_generic, params)


def test_single_vector_input_is_a_batch_of_one(tiny_generic):
    params = init_params(tiny_generic, Rng(0))
    x = Rng(1).normal(size=8)
    np.testing.assert_allclose(forecast(x, tiny_generic, params)[0], forecast(x[None, :], tiny_generic, params)[0])


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_topologies_produce_batched_forecasts(tiny_generic, topology):
    cfg = tiny_generic.with_topology(topology)
    params = init_params(cfg, Rng(2))
    x = Rng(3).normal(size=(5, cfg.input_len))
    trace = topology_forward(x, cfg, params)
    assert trace.forecast.shape == (5, cfg.horizon)
    assert len(trace.forecasts) == cfg.block_count
    np.testing.assert_allclose(sum(trace.stack_forecasts), trace.forecast, atol=1e-12)


def test_dress_feeds_residuals_forward(tiny_generic):
    params = init_params(tiny_generic, Rng(4))
    x = Rng(5).normal(size=(3, 8))
    trace = model_forward(x, tiny_generic, params)
    np.testing.assert_allclose(trace.inputs[1], x - trace.backcasts[0])
    np.testing.assert_allclose(trace.forecast, trace.forecasts[0] + trace.forecasts[1])


def test_variant_wiring(tiny_generic):
    x = Rng(6).normal(size=(2, 8))
    parallel = tiny_generic.with_topology(PARALLEL)
    trace = topology_forward(x, parallel, init_params(parallel, Rng(0)))
    assert all(np.array_equal(inp, x) for inp in trace.inputs)

    no_residual = tiny_generic.with_topology(NO_RESIDUAL)
    trace = topology_forward(x, no_residual, init_params(no_residual, Rng(0)))
    np.testing.assert_allclose(trace.inputs[1], trace.backcasts[0])

    last = tiny_generic.with_topology(LAST_FORWARD)
    trace = topology_forward(x, last, init_params(last, Rng(0)))
    np.testing.assert_allclose(trace.forecast, trace.forecasts[-1])

    residual_input = tiny_generic.with_topology(RESIDUAL_INPUT)
    trace = topology_forward(x, residual_input, init_params(residual_input, Rng(0)))
    np.testing.assert_allclose(trace.inputs[1], x - trace.backcasts[0])


def test_model_forward_runs_dress_only(tiny_generic):
    cfg = tiny_generic.with_topology(PARALLEL)
    with pytest.raises(ValueError, match="DRESS"):
        model_forward(np.zeros((1, 8)), cfg, init_params(cfg, Rng(0)))


def test_block_forward_shapes():
    cfg = make_block_config(TREND, 8, 2, 12, 6, degree=2)
    single = preset_interpretable(6, 2, t_width=8, t_blocks=1, t_layers=2, s_blocks=0)
    params = init_params(single, Rng(0)).block(0, 0)
    backcast, fcast, _ = block_forward(Rng(1).normal(size=(4, 12)), params, cfg)
    assert backcast.shape == (4, 12) and fcast.shape == (4, 6)


# --- Structure of the interpretable stacks ---

def test_trend_and_seasonality_partials_stay_in_their_bases():
    for seed in range(100):
        cfg = preset_interpretable(6, 2, t_width=8, t_blocks=2, t_layers=2, s_width=8, s_blocks=2, s_layers=2)
        params = init_params(cfg, Rng(seed))
        x = Rng(seed + 1000).uniform(0.5, 2.0, (1, cfg.input_len))
        trace = topology_forward(x, cfg, params)
        trend, season = trace.stack_forecasts[0][0], trace.stack_forecasts[1][0]

        scale = max(1.0, np.abs(trend).max())
        assert np.abs(np.diff(trend, n=3)).max() <= 1e-8 * scale

        _, T_fwd = make_fourier_basis(cfg.input_len, cfg.horizon)
        coef, *_ = np.linalg.lstsq(T_fwd, season, rcond=None)
        residual = np.linalg.norm(T_fwd @ coef - season)
        assert residual <= 1e-8 * max(1.0, np.linalg.norm(season))


def test_decomposition_identity(tiny_interpretable):
    params = init_params(tiny_interpretable, Rng(21))
    x = Rng(22).uniform(1.0, 3.0, (10, tiny_interpretable.input_len))
    trace = topology_forward(x, tiny_interpretable, params)
    trend, season = trace.stack_forecasts
    np.testing.assert_allclose(trend + season, trace.forecast, atol=1e-9)


def test_published_trace_row_sums():
    # a printed two-stack trace row: STACK1 + STACK2 = FORECAST
    assert 0.781290 + 0.020778 == pytest.approx(0.802068, abs=1e-5)


# --- Gradient checks ---

def _activation_pattern(trace, target):
    parts = [z > 0 for cache in trace.caches for z in cache.pre_activations]
    parts.append(np.sign(target - trace.forecast) > 0)
    return b"".join(p.tobytes() for p in parts)


def _objective(cfg, x, y, kind):
    """(f, skip) for grad_check; SMAPE holds its denominator at the base forecast."""
    mask = np.ones_like(y)
    patterns = []
    frozen = {}

    def f(tensors):
        params = ParamStore(cfg, tensors)
        trace = topology_forward(x, cfg, params)
        patterns.append(_activation_pattern(trace, y))
        yhat = trace.forecast
        if kind == SMAPE:
            if "denom" not in frozen:
                frozen["denom"] = np.abs(y) + np.abs(yhat)
            loss = 200.0 / mask.sum() * np.sum(np.abs(y - yhat) / frozen["denom"])
            _, grad = smape_loss(yhat, y, mask)
        elif kind == MAPE:
            loss, grad = mape_loss(yhat, y, mask)
        else:
            loss, grad = mase_loss(yhat, y, mask, x, 1)
        return float(loss), model_backward(trace, grad, cfg, params).tensors

    def skip(name, index):
        # a ReLU or |.| kink inside the finite-difference step
        return patterns[-1] != patterns[0] or patterns[-2] != patterns[0]

    return f, skip


def _check(cfg, kind, seed):
    rng = Rng(seed)
    params = init_params(cfg, rng)
    x = rng.uniform(0.5, 2.0, (3, cfg.input_len))
    y = rng.uniform(1.0, 2.0, (3, cfg.horizon))
    f, skip = _objective(cfg, x, y, kind)
    coords = sample_coords(params.tensors, 6, rng)
    return grad_check(f, params.tensors, step=1e-5, tolerance=1e-4, floor=1e-3, coords=coords, skip=skip)


@pytest.mark.parametrize("kind", [SMAPE, MAPE, MASE])
def test_generic_model_gradients(kind):
    cfg = preset_generic(horizon=4, lookback_multiple=2, stacks=3, width=16, fc_layers=4)
    for seed in range(20):
        report = _check(cfg, kind, seed)
        assert report.passed, f"seed {seed}: {report.max_rel_error} at {report.worst()}"


@pytest.mark.parametrize("kind", [SMAPE, MAPE, MASE])
def test_interpretable_model_gradients(kind):
    cfg = preset_interpretable(6, 2, t_width=16, t_blocks=2, t_layers=2, s_width=16, s_blocks=2, s_layers=2)
    for seed in range(20):
        report = _check(cfg, kind, seed)
        assert report.passed, f"seed {seed}: {report.max_rel_error} at {report.worst()}"


@pytest.mark.parametrize("topology", [t for t in TOPOLOGIES if t != DRESS])
def test_variant_topology_gradients(topology):
    cfg = preset_generic(horizon=4, lookback_multiple=2, stacks=3, width=8, fc_layers=2, topology=topology)
    for seed in range(3):
        report = _check(cfg, MAPE, seed)
        assert report.passed, f"{topology} seed {seed}: {report.max_rel_error}"


def test_shared_weights_gradient_is_summed_over_blocks():
    cfg = preset_interpretable(6, 2, t_width=8, t_blocks=3, t_layers=2, s_blocks=0)
    report = _check(cfg, MAPE, 5)
    assert report.passed


# --- Structural identities ---

def test_zero_weight_generic_block_returns_its_basis_biases():
    cfg = make_block_config(GENERIC, 8, 3, 12, 6)
    for seed in range(20):
        rng = Rng(seed)
        params = {layer: np.zeros(shape) for layer, shape in block_layer_shapes(cfg)}
        params["basis_b.b"] = rng.normal(size=12)
        params["basis_f.b"] = rng.normal(size=6)
        backcast, fcast, _ = block_forward(rng.normal(scale=10.0, size=(4, 12)), params, cfg)
        np.testing.assert_array_equal(backcast, np.broadcast_to(params["basis_b.b"], (4, 12)))
        np.testing.assert_array_equal(fcast, np.broadcast_to(params["basis_f.b"], (4, 6)))


def test_generic_forecast_lies_in_the_span_of_its_basis():
    cfg = preset_generic(horizon=6, lookback_multiple=2, stacks=1, width=8, fc_layers=2, theta_dim=2)
    V_name, b_name = tensor_name(0, 0, "basis_f.V"), tensor_name(0, 0, "basis_f.b")
    for seed in range(100):
        rng = Rng(seed)
        params = init_params(cfg, rng)
        params.tensors[b_name] = rng.normal(size=6)
        yhat = forecast(rng.uniform(0.5, 2.0, (1, cfg.input_len)), cfg, params)[0]
        shifted = yhat - params[b_name]
        coef, *_ = np.linalg.lstsq(params[V_name], shifted, rcond=None)
        residual = np.linalg.norm(params[V_name] @ coef - shifted)
        assert residual <= 1e-10 * max(1.0, np.linalg.norm(shifted))


def test_parallel_forecast_is_the_sum_of_block_forecasts():
    for seed in range(20):
        cfg = preset_generic(horizon=4, lookback_multiple=2, stacks=3, blocks=2, width=8, fc_layers=2,
                             topology=PARALLEL)
        params = init_params(cfg, Rng(seed))
        trace = topology_forward(Rng(seed + 500).normal(size=(3, 8)), cfg, params)
        np.testing.assert_allclose(trace.forecast, sum(trace.forecasts), rtol=1e-12, atol=1e-12)


def test_parallel_shared_blocks_repeat_one_forecast():
    blocks = 4
    cfg = preset_generic(horizon=4, lookback_multiple=2, stacks=1, blocks=blocks, width=8, fc_layers=2,
                         share_weights=True, topology=PARALLEL)
    for seed in range(20):
        params = init_params(cfg, Rng(seed))
        trace = topology_forward(Rng(seed + 500).normal(size=(3, 8)), cfg, params)
        np.testing.assert_allclose(trace.forecast, blocks * trace.forecasts[0], rtol=1e-12, atol=1e-12)


def test_every_topology_matches_dress_with_a_single_block():
    base = preset_generic(horizon=4, lookback_multiple=2, stacks=1, blocks=1, width=8, fc_layers=2)
    for seed in range(10):
        params = init_params(base, Rng(seed))
        x = Rng(seed + 500).normal(size=(3, 8))
        grad = Rng(seed + 900).normal(size=(3, 4))
        reference = topology_forward(x, base, params)
        reference_grads = model_backward(reference, grad, base, params)
        for topology in TOPOLOGIES:
            cfg = base.with_topology(topology)
            moved = ParamStore(cfg, params.tensors)
            trace = topology_forward(x, cfg, moved)
            np.testing.assert_array_equal(trace.forecast, reference.forecast)
            grads = model_backward(trace, grad, cfg, moved)
            for name, g in reference_grads.items():
                np.testing.assert_allclose(grads[name], g, rtol=1e-12, atol=1e-12, err_msg=f"{topology} {name}")


def test_init_params_moments_at_full_width():
    cfg = preset_generic(horizon=4, lookback_multiple=2, stacks=1, width=512, fc_layers=2)
    params = init_params(cfg, Rng(8))
    for name, shape in param_shapes(cfg).items():
        values = params[name]
        if len(shape) == 1:
            assert not values.any(), name
            continue
        bound = 1.0 / np.sqrt(shape[1])
        assert np.abs(values).max() <= bound, name
        if values.size >= 4096:
            assert abs(values.mean()) <= 0.05 * bound, name
            assert values.std() == pytest.approx(bound / np.sqrt(3.0), rel=0.2), name
    hidden = params[tensor_name(0, 0, "fc1.W")]
    assert hidden.shape == (512, 512)
    assert hidden.std() == pytest.approx((1.0 / np.sqrt(512)) / np.sqrt(3.0), rel=0.2)


# --- Gradient identities ---

@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_shared_stack_gradient_is_the_sum_of_unshared_block_gradients(topology):
    kwargs = dict(horizon=4, lookback_multiple=2, stacks=1, blocks=3, width=8, fc_layers=2, topology=topology)
    shared = preset_generic(share_weights=True, **kwargs)
    unshared = preset_generic(share_weights=False, **kwargs)
    layers = [layer for layer, _ in block_layer_shapes(shared.stacks[0].block)]
    for seed in range(10):
        rng = Rng(seed)
        params = init_params(shared, rng)
        copied = ParamStore(unshared, {tensor_name(0, b, layer): params[tensor_name(0, 0, layer)].copy()
                                       for b in range(3) for layer in layers})
        x = rng.uniform(0.5, 2.0, (3, 8))
        grad = rng.normal(size=(3, 4))

        shared_trace = topology_forward(x, shared, params)
        unshared_trace = topology_forward(x, unshared, copied)
        np.testing.assert_allclose(shared_trace.forecast, unshared_trace.forecast, rtol=1e-12, atol=1e-12)

        shared_grads = model_backward(shared_trace, grad, shared, params)
        unshared_grads = model_backward(unshared_trace, grad, unshared, copied)
        for layer in layers:
            summed = sum(unshared_grads[tensor_name(0, b, layer)] for b in range(3))
            np.testing.assert_allclose(shared_grads[tensor_name(0, 0, layer)], summed,
                                       rtol=1e-10, atol=1e-12, err_msg=f"seed {seed} {layer}")


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_zero_upstream_gradient_gives_zero_parameter_gradients(topology, tiny_interpretable):
    for cfg in (preset_generic(horizon=4, lookback_multiple=2, stacks=3, width=8, fc_layers=2, topology=topology),
                tiny_interpretable.with_topology(topology)):
        params = init_params(cfg, Rng(3))
        trace = topology_forward(Rng(4).normal(size=(5, cfg.input_len)), cfg, params)
        grads = model_backward(trace, np.zeros_like(trace.forecast), cfg, params)
        assert all(not g.any() for g in grads.tensors.values())
