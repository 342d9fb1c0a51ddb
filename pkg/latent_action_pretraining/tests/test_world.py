import numpy as np
import pytest

from latent_action_pretraining import world
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import CATEGORIES, is_unseen_object, parse_instruction
from latent_action_pretraining.schemas import EnvConfig
from latent_action_pretraining.world import Block, EnvState, Task


CONFIG = EnvConfig()


@pytest.mark.parametrize('split', ['seen', 'unseen'])
def test_reset_is_deterministic(split):
    for seed in range(10):
        assert world.reset(seed, CONFIG, split) == world.reset(seed, CONFIG, split)


def test_reset_respects_splits():
    for seed in range(30):
        seen_state, _ = world.reset(seed, CONFIG, 'seen')
        unseen_state, unseen_task = world.reset(seed, CONFIG, 'unseen')

        assert not any(is_unseen_object(block.noun) for block in seen_state.blocks)
        assert is_unseen_object(unseen_state.blocks[unseen_task.target].noun)
        assert CONFIG.min_blocks <= len(seen_state.blocks) <= CONFIG.max_blocks


def test_reset_task_matches_instruction():
    for seed in range(20):
        state, task = world.reset(seed, CONFIG)
        parsed = parse_instruction(task.instruction)

        assert parsed.category == task.category
        assert parsed.target == state.blocks[task.target].noun
        if task.reference is not None:
            assert parsed.reference == state.blocks[task.reference].noun
        assert world.success(state, task, CONFIG) < 1.0


def test_reset_unknown_split():
    with pytest.raises(ContractViolation):
        world.reset(0, CONFIG, 'novel')


def test_step_clamps_effector():
    state = EnvState(effector=(0.99, 0.01), blocks=(_block((0.5, 0.5)), ))

    moved = world.step(state, (0.05, -0.05), CONFIG)

    assert moved.effector == (1.0, 0.0)
    assert moved.steps == 1


def test_step_pushes_block_to_contact_boundary():
    contact = CONFIG.contact_radius
    state = EnvState(effector=(0.5 - contact - 0.01, 0.5), blocks=(_block((0.5, 0.5)), _block((0.2, 0.8))))

    moved = world.step(state, (0.05, 0.0), CONFIG)

    assert moved.blocks[0].position[0] == pytest.approx(moved.effector[0] + contact)
    assert moved.blocks[0].position[1] == pytest.approx(0.5)
    assert moved.blocks[1].position == (0.2, 0.8)


@pytest.mark.parametrize('action', [(0.09, 0.0), (0.0, -0.2), (0.0, 0.0, 0.0), (float('nan'), 0.0)])
def test_step_rejects_invalid_action(action):
    state, _ = world.reset(0, CONFIG)

    with pytest.raises(ContractViolation):
        world.step(state, action, CONFIG)


@pytest.mark.parametrize('effector, reference, expected', [
    ((0.9, 0.9), (0.6, 0.5), 1.0),
    ((0.42, 0.5), (0.9, 0.9), 0.5),
    ((0.1, 0.1), (0.9, 0.9), 0.0),
])
def test_success_block2block(effector, reference, expected):
    state = EnvState(effector=effector, blocks=(_block((0.5, 0.5)), _block(reference, 'blue')))
    task = Task('push the red circle to the blue circle', 'block2block', 0, 1, None)

    assert world.success(state, task, CONFIG) == expected


def test_success_absolute_and_separate():
    state = EnvState(effector=(0.1, 0.9), blocks=(_block((0.5, 0.55)), _block((0.95, 0.95), 'blue')))

    center = Task('push the red circle to the center', 'block2absolute', 0, None, 'center')
    separate = Task('separate the red circle from the blue circle', 'separate', 0, 1, None)

    assert world.success(state, center, CONFIG) == 1.0
    assert world.success(state, separate, CONFIG) == 1.0


def test_render_and_effector_centroid():
    state, _ = world.reset(3, CONFIG)

    frame = world.render(state, CONFIG)
    centroid = world.effector_centroid(frame)

    assert frame.shape == (CONFIG.image_size, CONFIG.image_size, 3)
    assert frame.dtype == np.uint8
    assert np.hypot(centroid[0] - state.effector[0], centroid[1] - state.effector[1]) < 0.05
    assert world.effector_centroid(frame.astype(np.float32) / 255.0) == pytest.approx(centroid)


def test_effector_centroid_missing():
    assert world.effector_centroid(np.full((8, 8, 3), 232, dtype=np.uint8)) is None


def test_expert_actions_are_bounded_and_replayable():
    for seed in range(3):
        episode = world.expert_episode(seed, CONFIG)

        assert len(episode.frames) == len(episode.actions) + 1
        assert len(episode.actions) <= CONFIG.max_steps
        assert np.abs(episode.actions).max(initial=0.0) <= CONFIG.delta_max
        assert np.array_equal(world.replay(seed, episode.actions, CONFIG), episode.frames)


@pytest.mark.slow
def test_expert_success_rate():
    episodes = [world.expert_episode(seed, CONFIG) for seed in range(100)]

    assert np.mean([episode.succeeded for episode in episodes]) >= 0.8


def test_zero_action_leaves_blocks_in_place():
    state = EnvState(effector=(0.95, 0.5), blocks=(_block((1.0, 0.55)), _block((0.3, 0.3), 'blue')))

    idle = state
    for _ in range(4):
        idle = world.step(idle, (0.0, 0.0), CONFIG)

    assert idle.blocks == state.blocks
    assert idle.effector == state.effector
    assert idle.steps == 4


def test_retreat_does_not_drag_pinned_block():
    state = EnvState(effector=(0.95, 0.5), blocks=(_block((1.0, 0.55)), ))

    moved = world.step(state, (-0.02, 0.0), CONFIG)

    assert moved.blocks == state.blocks


def test_step_without_contact_moves_only_effector():
    state = EnvState(effector=(0.3, 0.3), blocks=(_block((0.7, 0.7)), _block((0.2, 0.8), 'blue')))

    moved = world.step(state, (CONFIG.delta_max, 0.0), CONFIG)

    assert moved.effector[0] == pytest.approx(0.3 + CONFIG.delta_max)
    assert moved.effector[1] == 0.3
    assert moved.blocks == state.blocks


def test_render_uses_palette_colors_only():
    palette = {tuple(color) for color in world.PALETTE.values()}
    for seed in range(10):
        frame = world.render(world.reset(seed, CONFIG)[0], CONFIG)

        assert {tuple(pixel) for pixel in frame.reshape(-1, 3)} <= palette


def test_render_reflects_block_motion():
    state, _ = world.reset(5, CONFIG)
    first = state.blocks[0]
    shifted = Block(first.color, first.shape, (first.position[0] + 0.1, first.position[1]))
    moved = EnvState(effector=state.effector, blocks=(shifted, ) + state.blocks[1:], steps=state.steps)

    assert not np.array_equal(world.render(state, CONFIG), world.render(moved, CONFIG))


@pytest.mark.slow
@pytest.mark.parametrize('split', ['seen', 'unseen'])
def test_reset_invariants(split):
    for seed in range(1000):
        state, task = world.reset(seed, CONFIG, split)
        positions = [block.position for block in state.blocks]

        assert CONFIG.min_blocks <= len(state.blocks) <= CONFIG.max_blocks
        assert all(0.0 <= value <= 1.0 for point in positions + [state.effector] for value in point)
        assert len({block.color for block in state.blocks}) == len(state.blocks)
        for index, point in enumerate(positions):
            assert all(np.hypot(point[0] - other[0], point[1] - other[1]) >= 2 * CONFIG.block_radius
                       for other in positions[index + 1:])
            assert np.hypot(point[0] - state.effector[0], point[1] - state.effector[1]) > CONFIG.contact_radius
        assert world.success(state, task, CONFIG) < 1.0


@pytest.mark.slow
def test_reset_categories_are_uniform():
    categories = [world.reset(seed, CONFIG)[1].category for seed in range(3000)]

    for category in CATEGORIES:
        assert abs(categories.count(category) / len(categories) - 1 / len(CATEGORIES)) <= 0.03


def _block(position, color='red'):
    return Block(color, 'circle', position)
