import numpy as np
import pytest

from latent_action_pretraining import world
from latent_action_pretraining.datasets import (
    Trajectory, TrajectoryDataset, encode_record, generate_dataset, read_shard, write_shard,
)
from latent_action_pretraining.exceptions import ContractViolation, MissingArtifact
from latent_action_pretraining.schemas import EnvConfig


CONFIG = EnvConfig(image_size=16)


def test_generate_dataset_is_byte_identical(tmp_path):
    first = generate_dataset(tmp_path / 'first', 5, seed=4, config=CONFIG, shard_size=2, workers=1)
    second = generate_dataset(tmp_path / 'second', 5, seed=4, config=CONFIG, shard_size=2, workers=1)

    assert first == second
    assert first.shards == ['shard-00000.bin', 'shard-00001.bin', 'shard-00002.bin']
    assert first.shard_records == [2, 2, 1]
    for name in first.shards:
        assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()


def test_dataset_trajectories_replay(tmp_path):
    manifest = generate_dataset(tmp_path, 3, seed=1, config=CONFIG, workers=1, dump_frames=1)
    dataset = TrajectoryDataset(tmp_path)

    assert len(dataset) == 3
    assert dataset.image_size == 16
    assert sum(dataset.category_counts().values()) == 3
    assert manifest.success_rate == 3 / (3 + manifest.rejected)
    assert (tmp_path / 'frames' / 'trajectory-00000.png').exists()
    for trajectory in dataset:
        assert trajectory.succeeded
        assert np.array_equal(world.replay(trajectory.seed, trajectory.actions, CONFIG), trajectory.frames)


def test_pair_index_and_split(tmp_path):
    generate_dataset(tmp_path, 4, seed=2, config=CONFIG, workers=1)
    dataset = TrajectoryDataset(tmp_path)

    pairs = dataset.pair_index(2)
    train, validation = dataset.split_indices(0.25)
    first, second = dataset.frame_pairs(pairs[:3], 2)

    assert len(pairs) == sum(trajectory.steps - 1 for trajectory in dataset)
    assert list(validation) == [3]
    assert list(train) == [0, 1, 2]
    assert first.shape == second.shape == (3, 16, 16, 3)
    with pytest.raises(ContractViolation):
        dataset.pair_index(0)


def test_missing_dataset(tmp_path):
    with pytest.raises(MissingArtifact):
        TrajectoryDataset(tmp_path / 'absent')


def test_shard_round_trip(tmp_path):
    trajectory = _trajectory(steps=3)

    manifest = write_shard(tmp_path / 'shard.bin', [trajectory, _trajectory(steps=1)], 4, 'unseen')
    read_manifest, records = read_shard(tmp_path / 'shard.bin', 'unseen')

    assert read_manifest == manifest
    assert records[0].instruction == trajectory.instruction
    assert records[0].split == 'unseen'
    assert np.array_equal(records[0].frames, trajectory.frames)
    assert np.array_equal(records[0].actions, trajectory.actions)
    assert records[1].steps == 1


def test_record_rejects_frame_count_mismatch():
    trajectory = _trajectory(steps=2)
    trajectory.frames = trajectory.frames[:2]

    with pytest.raises(ContractViolation):
        encode_record(trajectory)


def test_shard_rejects_bad_magic(tmp_path):
    path = tmp_path / 'shard.bin'
    write_shard(path, [_trajectory(steps=1)], 4, 'seen')
    raw = bytearray(path.read_bytes())
    raw[:8] = b'XXXXXXXX'
    path.write_bytes(bytes(raw))

    with pytest.raises(ContractViolation):
        read_shard(path)


def _trajectory(steps):
    generator = np.random.default_rng(steps)
    return Trajectory(instruction='push the red circle to the center',
                      frames=generator.integers(0, 256, size=(steps + 1, 4, 4, 3), dtype=np.uint8),
                      actions=generator.uniform(-0.08, 0.08, size=(steps, 2)).astype(np.float32),
                      seed=steps, score=1.0, category='block2absolute')
