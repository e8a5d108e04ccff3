"""
Tests for the WiFlow network: parameter and MAC accounting, the stage shape
trace, TCN causality, eval/train behaviour, checkpoints and parameter gradients.

Run with: pytest tests/test_wiflow_model.py -v
"""
import numpy as np
import pytest

from core.checkpoint import load_checkpoint, save_checkpoint
from core.errors import ConfigError, ShapeError
from core.gradcheck_suite import per_layer, run_model_check
from core.tensor_core import Tensor, no_grad
from core.wiflow_model import (
    REPORTED_MACS,
    REPORTED_PARAMS,
    WiFlowConfig,
    asym_res_block,
    axial_attention,
    axial_stage,
    count_flops,
    count_parameters,
    expected_shape_trace,
    forward,
    init_model,
    layer_specs,
    predict,
    spatial_reshape,
    spatial_unreshape,
    tcn_encoder,
)

DEFAULT_TRACE = [
    ('Input', (540, 20)),
    ('TCN Layer 1', (540, 20)),
    ('TCN Layer 2', (440, 20)),
    ('TCN Layer 3', (340, 20)),
    ('TCN Layer 4', (240, 20)),
    ('ConvBlock1 (up)', (8, 20, 240)),
    ('ResBlock 1', (8, 20, 120)),
    ('ResBlock 2', (16, 20, 60)),
    ('ResBlock 3', (32, 20, 30)),
    ('ResBlock 4', (64, 20, 15)),
    ('AxialAttention', (64, 15, 20)),
    ('Decoder', (2, 15, 20)),
    ('Avg Pooling', (2, 15, 1)),
    ('Output', (15, 2)),
]


def test_default_parameter_count():
    config = WiFlowConfig()
    params = count_parameters(config)
    assert params == 1_861_173
    assert 1.8e6 <= params <= 2.7e6
    assert 0.5 <= params / REPORTED_PARAMS <= 1.5


def test_default_macs_near_reported():
    macs = count_flops(WiFlowConfig())
    assert REPORTED_MACS / 2 <= macs <= REPORTED_MACS * 2


def test_store_matches_layer_inventory(tiny_config):
    store = init_model(tiny_config, seed=3)
    assert store.count() == count_parameters(tiny_config)
    assert {s.path for s in layer_specs(tiny_config) if s.kind == 'bn'} == {
        name[:-len('.running_mean')] for name in store.buffers if name.endswith('.running_mean')}


def test_init_is_deterministic_per_seed(tiny_config):
    a, b, c = init_model(tiny_config, seed=5), init_model(tiny_config, seed=5), init_model(tiny_config, seed=6)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.names())
    assert not np.array_equal(a.params['tcn.0.conv0.weight'].data, c.params['tcn.0.conv0.weight'].data)


def test_default_shape_trace():
    config = WiFlowConfig()
    assert expected_shape_trace(config) == DEFAULT_TRACE
    store = init_model(config, seed=0)
    trace = []
    window = np.random.default_rng(0).normal(size=(540, 20))
    with no_grad():
        out = forward(window, store, trace=trace)
    assert out.shape == (15, 2)
    assert trace == DEFAULT_TRACE


def test_debug_flag_checks_trace(tiny_config, monkeypatch, rng):
    monkeypatch.setenv('WIFLOW_DEBUG', '1')
    store = init_model(tiny_config, seed=0)
    with no_grad():
        assert forward(rng.normal(size=(3, 80, 5)), store).shape == (3, 15, 2)


def test_forward_rejects_wrong_input(tiny_config, rng):
    store = init_model(tiny_config)
    with pytest.raises(ShapeError):
        forward(rng.normal(size=(80, 6)), store)
    with pytest.raises(ValueError):
        forward(rng.normal(size=(80, 5)), store, mode='test')


def test_tcn_encoder_is_causal(tiny_config, rng, float64):
    """Perturbing time step t' leaves every TCN output before t' bitwise unchanged."""
    store = init_model(tiny_config, seed=1)
    for _ in range(100):
        x = rng.normal(size=(1, 80, 5))
        t_prime = int(rng.integers(0, 5))
        bumped = x.copy()
        bumped[0, :, t_prime] += rng.normal(size=80)
        with no_grad():
            base = tcn_encoder(Tensor(x), store).data
            moved = tcn_encoder(Tensor(bumped), store).data
        assert np.array_equal(base[..., :t_prime], moved[..., :t_prime])


def test_eval_is_per_sample_and_train_updates_buffers(tiny_config, rng):
    store = init_model(tiny_config, seed=2)
    batch = rng.normal(size=(4, 80, 5))
    with no_grad():
        batched = forward(batch, store).data
        single = forward(batch[1], store).data
    assert np.allclose(batched[1], single, atol=1e-5)

    before = store.buffers['decoder.bn.running_mean'].copy()
    with no_grad():
        forward(batch, store, mode='train')
    assert not np.array_equal(before, store.buffers['decoder.bn.running_mean'])


def test_config_validation():
    with pytest.raises(ConfigError):
        WiFlowConfig(tcn_dilations=[1, 2]).validate()
    with pytest.raises(ConfigError):
        WiFlowConfig(tcn_groups=7).validate()
    with pytest.raises(ConfigError):
        WiFlowConfig(tcn_channel_schedule=[540, 440, 340, 200]).validate()
    with pytest.raises(ConfigError):
        WiFlowConfig(attention_groups=5).validate()


def test_checkpoint_round_trip(tmp_path, tiny_config, rng):
    store = init_model(tiny_config, seed=4)
    with no_grad():
        forward(rng.normal(size=(4, 80, 5)), store, mode='train')
    path = save_checkpoint(tmp_path / 'model.ckpt', store, {'epoch': 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {'epoch': 3}
    assert loaded.config == tiny_config
    windows = rng.normal(size=(6, 80, 5)).astype(np.float32)
    assert np.array_equal(predict(store, windows), predict(loaded, windows))


def test_checkpoint_rejects_bad_files(tmp_path, tiny_config):
    (tmp_path / 'junk.ckpt').write_bytes(b'NOPE' + bytes(16))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / 'junk.ckpt')
    path = save_checkpoint(tmp_path / 'model.ckpt', init_model(tiny_config))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ShapeError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'absent.ckpt')


def test_parameter_gradients_match_finite_differences(tiny_config):
    frame = run_model_check(tiny_config, seed=0, bits=64)
    assert set(frame.columns) == {'layer', 'parameter', 'max_rel_error'}
    layers = per_layer(frame)
    assert frame['max_rel_error'].max() < 1e-4
    assert len(layers) >= 5


def test_forward_reads_every_parameter(tiny_config, rng, monkeypatch):
    store = init_model(tiny_config, seed=2)
    with no_grad():
        forward(rng.normal(size=(2, 80, 5)), store)
    assert store.unread() == []
    assert set(store.names()) <= store.touched

    monkeypatch.setenv('WIFLOW_DEBUG', '1')
    store.params['spare.weight'] = Tensor(np.zeros(3))
    with no_grad(), pytest.raises(ConfigError):
        forward(rng.normal(size=(80, 5)), store)


def test_spatial_reshape_index_map(rng):
    x = Tensor(rng.normal(size=(2, 240, 20)))
    y = spatial_reshape(x)
    assert y.shape == (2, 1, 20, 240)
    assert y.data[0, 0, 3, 7] == x.data[0, 7, 3]
    assert np.array_equal(spatial_unreshape(y).data, x.data)


def _identity_bn(store, path):
    store.params[f'{path}.gamma'].data[...] = 1.0
    store.params[f'{path}.beta'].data[...] = 0.0
    store.buffers[f'{path}.running_mean'][...] = 0.0
    store.buffers[f'{path}.running_var'][...] = 1.0


def test_uniform_attention_averages_each_axis(tiny_config, rng, float64):
    store = init_model(tiny_config, seed=4)
    for stage in ('width', 'height'):
        prefix = f'attention.{stage}'
        store.params[f'{prefix}.w_q'].data[...] = 0.0
        store.params[f'{prefix}.w_k'].data[...] = 0.0
        w_v = store.params[f'{prefix}.w_v'].data
        w_v[...] = np.eye(w_v.shape[0])
        _identity_bn(store, f'{prefix}.bn')

    rows = rng.normal(size=(3, 4, 5))
    with no_grad():
        width = axial_stage(Tensor(rows), store, 'attention.width', 2, training=False).data
    expected = np.broadcast_to(rows.mean(axis=-1, keepdims=True), rows.shape)
    assert np.allclose(width, expected / np.sqrt(1 + 1e-5))

    x = rng.normal(size=(2, 4, 15, 5))
    with no_grad():
        out = axial_attention(Tensor(x), store, training=False).data
    assert out.shape == x.shape
    expected = np.broadcast_to(x.mean(axis=(2, 3), keepdims=True), x.shape)
    assert np.allclose(out, expected / (1 + 1e-5))


def test_residual_block_zero_input_gives_shortcut_bias(tiny_config, float64):
    store = init_model(tiny_config, seed=5)
    prefix = 'spatial.res2'
    for j in (1, 2):
        _identity_bn(store, f'{prefix}.bn{j}')
    for j in (1, 2, 3):
        store.params[f'{prefix}.conv{j}.bias'].data[...] = 0.0
    shortcut_bias = np.array([0.5, -1.0, 2.0, 0.25])
    store.params[f'{prefix}.shortcut.bias'].data[...] = shortcut_bias
    with no_grad():
        out = asym_res_block(Tensor(np.zeros((1, 2, 5, 30))), store, prefix, training=False).data
    assert out.shape == (1, 4, 5, 15)
    assert np.allclose(out, shortcut_bias[None, :, None, None])


def test_residual_blocks_halve_width_and_grow_channels(tiny_config, rng):
    store = init_model(tiny_config, seed=6)
    x = Tensor(rng.normal(size=(1, 2, 5, 60)))
    shapes = []
    with no_grad():
        for n in (1, 2):
            x = asym_res_block(x, store, f'spatial.res{n}', training=False)
            shapes.append(x.shape[1:])
    assert shapes == [(2, 5, 30), (4, 5, 15)]
    with no_grad(), pytest.raises(ShapeError):
        asym_res_block(x, store, 'spatial.res1', training=False)

    rows = [shape for label, shape in DEFAULT_TRACE if label.startswith('ResBlock')]
    for before, after in zip(rows, rows[1:]):
        assert after[0] == 2 * before[0] and after[1] == before[1] and after[2] * 2 == before[2]
