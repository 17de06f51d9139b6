"""
Testes da rede completa: configuração, codificador, decodificador, checkpoint
"""

import numpy as np
import pytest

import tensor_core as tc
from backbone import (EncoderLevel, NetworkConfig, decode, encode, forward_network, init_params, load_checkpoint,
                      parameter_count, plan_geometry, round_to_checkpoint, save_checkpoint)
from enrichment import enrich
from errors import ConfigError, ContractError, FormatError
from training_eval import cross_entropy_loss, gradcheck_config, network_gradient_check


def toy_config(**changes):
    base = dict(block_samples=8, in_channels=3, num_classes=2, k=3, enrich_radius=0.5,
                layer_scales=[4, 2], layer_radii=[0.5, 1.0], group_sizes=[3, 3], channel_widths=[4, 6],
                gpm_enabled=[True, False], gpm_stack_depth=2, mlp_layers=2, decoder_widths=[5, 4])
    base.update(changes)
    return NetworkConfig(**base).validate()


def block(rng, n):
    xyz = rng.uniform(0, 1, size=(n, 3))
    return xyz - xyz.min(axis=0), xyz


def test_default_config_is_valid():
    config = NetworkConfig().validate()
    assert config.layer_scales == [1024, 256, 64, 16]
    assert config.gpm_enabled == [True, True, False, False]
    assert config.enriched_width == 18
    assert config.feature_width == 128


def test_config_rejects_bad_scales_and_unknown_keys():
    with pytest.raises(ConfigError):
        toy_config(layer_scales=[2, 4])
    with pytest.raises(ConfigError):
        toy_config(layer_scales=[16, 2])
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"block_samples": 8, "dropout": 0.5})
    assert NetworkConfig.from_dict(toy_config().to_dict()) == toy_config()


def test_encode_shapes_on_toy_config(rng):
    config = toy_config()
    params = init_params(config, seed=0)
    features, xyz = block(rng, 8)
    levels = encode(enrich(features, plan_geometry(xyz, config).neighbors, "gated", params.enrichment),
                    xyz, config, params)
    assert [level.features.shape for level in levels] == [(8, 18), (4, 8), (2, 6)]
    assert levels[1].xyz.shape == (4, 3)


def test_encode_requires_configured_sample_count(rng):
    config = toy_config()
    params = init_params(config)
    features, xyz = block(rng, 9)
    with pytest.raises(ContractError):
        encode(features, xyz, config, params)


def test_scale_exceeding_points_is_contract_error(rng):
    config = toy_config()
    with pytest.raises(ContractError):
        plan_geometry(rng.uniform(size=(3, 3)), config)


def test_identical_points_give_constant_layer_features(rng):
    config = toy_config()
    params = init_params(config, seed=1)
    xyz = np.tile([[0.3, 0.3, 0.3]], (8, 1))
    features = np.tile([[0.1, 0.2, 0.3]], (8, 1))
    levels = encode(enrich(features, plan_geometry(xyz, config).neighbors, "gated", params.enrichment),
                    xyz, config, params)
    for level in levels[1:]:
        np.testing.assert_allclose(level.features.data, level.features.data[:1].repeat(level.features.shape[0], 0),
                                   atol=1e-12)


def test_centroid_multiset_is_permutation_invariant(rng):
    config = toy_config(block_samples=32, layer_scales=[32, 8])
    xyz = rng.uniform(size=(32, 3))
    perm = rng.permutation(32)
    first = plan_geometry(xyz, config).layers[0].xyz
    second = plan_geometry(xyz[perm], config).layers[0].xyz
    # escala igual ao número de pontos: todos os pontos são centróides
    np.testing.assert_array_equal(np.sort(first, axis=0), np.sort(second, axis=0))


def test_one_layer_decode_is_interpolation_plus_fc(rng):
    config = toy_config(layer_scales=[4], layer_radii=[0.5], group_sizes=[3], channel_widths=[4],
                        gpm_enabled=[False], decoder_widths=[5])
    params = init_params(config)
    features, xyz = block(rng, 8)
    geometry = plan_geometry(xyz, config)
    levels = encode(enrich(features, geometry.neighbors, "gated", params.enrichment), xyz, config, params, geometry)
    out = decode(levels, config, params, geometry).data
    index, weights = geometry.interpolation[0]
    up = np.einsum("mk,mkc->mc", weights, levels[1].features.data[index])
    lateral = np.concatenate([up, levels[0].features.data], axis=1)
    expected = np.maximum(lateral @ params.decoder[0].w.data + params.decoder[0].b.data, 0.0)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_constant_levels_give_constant_decoder_output(rng):
    config = toy_config()
    params = init_params(config)
    _, xyz = block(rng, 8)
    geometry = plan_geometry(xyz, config)
    widths = config.level_widths()
    levels = [EncoderLevel(xyz, tc.Tensor(np.full((8, widths[0]), 0.7)))]
    for layer, width in zip(geometry.layers, widths[1:]):
        levels.append(EncoderLevel(layer.xyz, tc.Tensor(np.full((layer.xyz.shape[0], width), -0.2))))
    out = decode(levels, config, params, geometry).data
    np.testing.assert_allclose(out, out[:1].repeat(8, 0), atol=1e-12)


def test_missing_lateral_is_contract_error(rng):
    config = toy_config()
    params = init_params(config)
    _, xyz = block(rng, 8)
    with pytest.raises(ContractError):
        decode([EncoderLevel(xyz, tc.Tensor(np.zeros((8, 18))))], config, params)


def test_default_config_output_shapes():
    config = NetworkConfig()
    widths = config.level_widths()
    assert widths == [18, 128, 256, 256, 512]
    params = init_params(config)
    assert params.decoder[-1].w.shape[1] == 128
    assert params.head.classifier.w.shape == (128, 13)


@pytest.mark.parametrize("samples, scales", [(8, [4, 2]), (64, [32, 16])])
def test_forward_is_finite(rng, samples, scales):
    config = toy_config(block_samples=samples, layer_scales=scales)
    params = init_params(config)
    features, xyz = block(rng, samples)
    timings = {}
    logits = forward_network(features, xyz, config, params, timings=timings)
    assert logits.shape == (samples, 2)
    assert np.all(np.isfinite(logits.data))
    assert set(timings) == {"geometry", "enrichment", "encoder", "decoder", "head"}


@pytest.mark.parametrize("mode, attention", [("gated", True), ("concat", True), ("none", False)])
def test_every_parameter_receives_gradient(rng, mode, attention):
    config = toy_config(context_mode=mode, use_attention=attention, gpm_enabled=[True, True])
    params = init_params(config, seed=3)
    features, xyz = block(rng, 8)
    params.zero_grad()
    with tc.Graph() as graph:
        loss = cross_entropy_loss(forward_network(features, xyz, config, params), np.arange(8) % 2)
        graph.backward(loss)
    missing = [name for name, t in params.named().items() if t.grad is None]
    assert missing == []


def test_parameter_names_are_unique_and_counted():
    config = toy_config()
    params = init_params(config)
    named = params.named()
    assert all(t.name == name for name, t in named.items())
    assert parameter_count(params) == sum(t.data.size for t in named.values())


def test_init_is_seeded():
    a, b = init_params(toy_config(), seed=5), init_params(toy_config(), seed=5)
    for (name, x), y in zip(a.named().items(), b.named().values()):
        np.testing.assert_array_equal(x.data, y.data, err_msg=name)


def test_checkpoint_round_trip_is_byte_identical(tmp_path, rng):
    config = toy_config()
    params = init_params(config, seed=2)
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(params, first)
    loaded = load_checkpoint(first, config)
    save_checkpoint(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:4] == b"ELGS"

    features, xyz = block(rng, 8)
    with tc.no_grad():
        again = load_checkpoint(second, config)
        np.testing.assert_array_equal(forward_network(features, xyz, config, loaded).data,
                                      forward_network(features, xyz, config, again).data)


def test_loaded_model_predicts_like_the_saved_one(tmp_path, rng):
    config = toy_config()
    params = init_params(config, seed=2)
    features, xyz = block(rng, 8)
    with tc.no_grad():
        before = forward_network(features, xyz, config, params).data.copy()
    save_checkpoint(params, tmp_path / "m.ckpt")
    with tc.no_grad():
        after = forward_network(features, xyz, config, load_checkpoint(tmp_path / "m.ckpt", config)).data
    np.testing.assert_array_equal(before, after)


def test_parameters_survive_float32_storage():
    params = init_params(toy_config(), seed=3)
    for tensor in params.named().values():
        tensor.data += 1e-12
    rounded = round_to_checkpoint(params)
    for name, tensor in rounded.named().items():
        np.testing.assert_array_equal(tensor.data, tensor.data.astype(np.float32).astype(tensor.data.dtype),
                                      err_msg=name)


def test_checkpoint_rejects_other_architecture(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(toy_config()), path)
    with pytest.raises(FormatError):
        load_checkpoint(path, toy_config(channel_widths=[4, 7]))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path, toy_config())


def test_full_network_gradient_check():
    config = gradcheck_config()
    assert config.block_samples == 32 and config.layer_scales == [16, 8]
    assert max(config.layer_out_width(l) for l in range(config.num_layers)) <= 16
    result = network_gradient_check(config, seed=0, max_entries_per_param=8)
    assert result.passed(1e-4), (result.max_rel_error, result.worst)


@pytest.mark.slow
def test_full_network_gradient_check_on_every_entry():
    result = network_gradient_check(gradcheck_config(), seed=0)
    assert result.checked == sum(t.data.size for t in init_params(gradcheck_config()).named().values())
    assert result.passed(1e-4), (result.max_rel_error, result.worst)
