import json

import numpy as np

from latent_action_pretraining.rng import RngStreams, derive_seed, generator


def test_generator_is_reproducible():
    first = generator(7, 'data', 3).standard_normal(5)
    second = generator(7, 'data', 3).standard_normal(5)

    assert np.array_equal(first, second)


def test_named_streams_are_independent():
    draws = {name: generator(7, name).standard_normal(4) for name in ('data', 'init', 'nsvq')}

    assert not np.allclose(draws['data'], draws['init'])
    assert not np.allclose(draws['init'], draws['nsvq'])
    assert not np.allclose(generator(7, 'data').standard_normal(4), generator(8, 'data').standard_normal(4))


def test_derive_seed_range():
    seeds = [derive_seed(seed, 'eval') for seed in range(20)]

    assert all(0 <= seed < 2 ** 63 for seed in seeds)
    assert len(set(seeds)) == len(seeds)
    assert derive_seed(3, 'data', 'pretrain') == derive_seed(3, 'data', 'pretrain')


def test_stream_is_cached():
    streams = RngStreams(1)

    assert streams.stream('noise') is streams.stream('noise')


def test_state_round_trip_through_json():
    streams = RngStreams(11)
    streams.stream('noise').standard_normal(3)
    streams.stream('init').integers(0, 10, size=2)
    state = json.loads(json.dumps(streams.state()))

    expected = streams.stream('noise').standard_normal(6)
    restored = RngStreams(0)
    restored.load_state(state)

    assert restored.seed == 11
    assert np.array_equal(restored.stream('noise').standard_normal(6), expected)


def test_fork_differs_from_parent():
    streams = RngStreams(5)

    assert streams.fork('worker').seed != streams.seed
    assert streams.fork('worker').seed == streams.fork('worker').seed
