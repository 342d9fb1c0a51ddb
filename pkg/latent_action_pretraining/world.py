"""
Мир толкания блоков с двумя степенями свободы: сброс, динамика, отрисовка,
критерий успеха и скриптовый эксперт.

Координаты лежат в [0, 1]^2, ось y направлена вверх.
"""
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple
import math

import numpy as np

from latent_action_pretraining import rng as lapa_rng
from latent_action_pretraining import validators
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import (
    CATEGORIES, COLORS, REGIONS, SHAPES, Noun, is_unseen_object, make_instruction,
)
from latent_action_pretraining.schemas import EnvConfig


Point = Tuple[float, float]

PALETTE: Dict[str, Tuple[int, int, int]] = {
    'background': (232, 232, 232),
    'red': (214, 39, 40),
    'blue': (31, 84, 214),
    'green': (44, 160, 44),
    'yellow': (228, 200, 30),
    'purple': (148, 70, 189),
    'orange': (255, 127, 14),
    'effector': (20, 20, 20),
}
_PALETTE_ARRAY = np.array(list(PALETTE.values()), dtype=np.int32)
_EFFECTOR_INDEX = list(PALETTE).index('effector')

BLOCK_MARGIN = 0.15
EFFECTOR_MARGIN = 0.05
MIN_BLOCK_DISTANCE = 0.2
SEPARATE_MIN_DISTANCE = 0.14
# Минимальная начальная удалённость цели от предиката
BLOCK2BLOCK_START = 0.3
ABSOLUTE_START = 0.25
SEPARATE_GOAL = 0.48
BLOCK2BLOCK_GOAL = 0.13
GOAL_GRID = np.linspace(0.1, 0.9, 9)
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class Block:
    color: str
    shape: str
    position: Point

    @property
    def noun(self) -> Noun:
        return Noun(self.color, self.shape)


@dataclass(frozen=True)
class EnvState:
    """ Состояние мира: позиция манипулятора, блоки, счётчик шагов """
    effector: Point
    blocks: Tuple[Block, ...]
    steps: int = 0


@dataclass(frozen=True)
class Task:
    """ Задача: инструкция и параметры предиката успеха """
    instruction: str
    category: str
    target: int
    reference: Optional[int]
    region: Optional[str]
    split: str = 'seen'


def _distance(first: Sequence[float], second: Sequence[float]) -> float:
    return math.hypot(first[0] - second[0], first[1] - second[1])


def _clamp(point: Sequence[float]) -> Point:
    return min(max(float(point[0]), 0.0), 1.0), min(max(float(point[1]), 0.0), 1.0)


def _draw_nouns(generator: np.random.Generator, count: int, split: str) -> List[Noun]:
    """
    Выбор объектов с попарно различными цветами.
    Первый объект - цель задачи; в сплите unseen он всегда удержанный.
    """
    seen_colors = [color for color in COLORS if color != 'purple']

    def seen_noun(colors: Sequence[str]) -> Noun:
        while True:
            noun = Noun(str(generator.choice(colors)), str(generator.choice(SHAPES)))
            if not is_unseen_object(noun):
                return noun

    if split == 'unseen':
        if generator.random() < 0.5:
            target = Noun('purple', str(generator.choice(SHAPES)))
        else:
            target = Noun('green', 'moon')
    else:
        target = seen_noun(seen_colors)

    nouns = [target]
    while len(nouns) < count:
        colors = [color for color in seen_colors if color not in {noun.color for noun in nouns}]
        nouns.append(seen_noun(colors))
    return nouns


def _place_blocks(generator: np.random.Generator, count: int, category: str) -> List[np.ndarray]:
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        positions = [generator.uniform(BLOCK_MARGIN, 1.0 - BLOCK_MARGIN, size=2)]
        if category == 'separate':
            angle = generator.uniform(0.0, 2.0 * math.pi)
            distance = generator.uniform(SEPARATE_MIN_DISTANCE, 0.22)
            positions.append(positions[0] + distance * np.array([math.cos(angle), math.sin(angle)]))
            if not ((positions[1] >= BLOCK_MARGIN) & (positions[1] <= 1.0 - BLOCK_MARGIN)).all():
                continue

        attempts = 0
        while len(positions) < count and attempts < MAX_PLACEMENT_ATTEMPTS:
            attempts += 1
            candidate = generator.uniform(BLOCK_MARGIN, 1.0 - BLOCK_MARGIN, size=2)
            if all(_distance(candidate, other) >= MIN_BLOCK_DISTANCE for other in positions):
                positions.append(candidate)

        if len(positions) == count:
            return positions

    raise ContractViolation(f'Не удалось разместить {count} блоков')


def reset(seed: int, config: Optional[EnvConfig] = None, split: str = 'seen') -> Tuple[EnvState, Task]:
    """
    Детерминированный сброс мира
    :param seed: зерно эпизода
    :param config: параметры мира
    :param split: seen / unseen
    :return: начальное состояние и задача
    """
    config = config or EnvConfig()
    if split not in ('seen', 'unseen'):
        raise ContractViolation(f'Неизвестный сплит {split}')

    generator = lapa_rng.generator(seed, 'world', 'reset', split)
    category = CATEGORIES[int(generator.integers(len(CATEGORIES)))]
    count = int(generator.integers(config.min_blocks, config.max_blocks + 1))
    nouns = _draw_nouns(generator, count, split)

    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        positions = _place_blocks(generator, count, category)
        target, reference = positions[0], positions[1]
        region = None

        if category == 'block2block' and _distance(target, reference) < BLOCK2BLOCK_START:
            continue
        if category == 'block2absolute':
            regions = [name for name, point in REGIONS.items() if _distance(target, point) >= ABSOLUTE_START]
            region = regions[int(generator.integers(len(regions)))]

        effector = _place_effector(generator, positions, target, config)
        if effector is not None:
            break
    else:
        raise ContractViolation(f'Не удалось построить начальное состояние для зерна {seed}')

    order = generator.permutation(count)
    blocks = tuple(Block(nouns[index].color, nouns[index].shape, _clamp(positions[index])) for index in order)
    slot = {int(index): position for position, index in enumerate(order)}

    task = Task(
        instruction=make_instruction(category, nouns[0], nouns[1] if category != 'block2absolute' else None, region),
        category=category,
        target=slot[0],
        reference=slot[1] if category != 'block2absolute' else None,
        region=region,
        split=split,
    )
    return EnvState(effector=_clamp(effector), blocks=blocks), task


def _place_effector(generator: np.random.Generator, positions: Sequence[np.ndarray], target: np.ndarray,
                    config: EnvConfig) -> Optional[np.ndarray]:
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        effector = generator.uniform(EFFECTOR_MARGIN, 1.0 - EFFECTOR_MARGIN, size=2)
        if _distance(effector, target) <= config.reach_radius + 0.02:
            continue
        if all(_distance(effector, position) > config.contact_radius + 0.01 for position in positions):
            return effector
    return None


def step(state: EnvState, action: Sequence[float], config: Optional[EnvConfig] = None) -> EnvState:
    """
    Квазистатический шаг: манипулятор смещается на действие, блоки в зоне контакта
    по ходу движения выталкиваются на границу контакта, все позиции ограничиваются [0, 1].
    Блоки позади манипулятора и при нулевом смещении остаются на месте.
    :param state: состояние
    :param action: (dx, dy), |компонента| <= delta_max
    :param config: параметры мира
    :return: новое состояние
    """
    config = config or EnvConfig()
    validators.validate_action(action, config.delta_max)

    dx, dy = float(action[0]), float(action[1])
    effector = _clamp((state.effector[0] + dx, state.effector[1] + dy))
    motion = (effector[0] - state.effector[0], effector[1] - state.effector[1])
    if motion == (0.0, 0.0):
        return replace(state, effector=effector, steps=state.steps + 1)

    contact = config.contact_radius
    blocks = []
    for block in state.blocks:
        distance = _distance(block.position, effector)
        ahead = (motion[0] * (block.position[0] - state.effector[0])
                 + motion[1] * (block.position[1] - state.effector[1])) > 0.0
        if distance < contact - 1e-9 and ahead:
            if distance > 0.0:
                direction = ((block.position[0] - effector[0]) / distance, (block.position[1] - effector[1]) / distance)
            else:
                norm = math.hypot(*motion)
                direction = (motion[0] / norm, motion[1] / norm)
            block = replace(block, position=_clamp((effector[0] + contact * direction[0],
                                                    effector[1] + contact * direction[1])))
        blocks.append(block)

    return EnvState(effector=effector, blocks=tuple(blocks), steps=state.steps + 1)


def success(state: EnvState, task: Task, config: Optional[EnvConfig] = None) -> float:
    """
    Оценка состояния по задаче
    :param state: состояние
    :param task: задача
    :param config: параметры мира
    :return: 1 - предикат выполнен, 0.5 - манипулятор рядом с целью, иначе 0
    """
    config = config or EnvConfig()
    target = state.blocks[task.target].position

    if task.category == 'block2block':
        done = _distance(target, state.blocks[task.reference].position) <= config.block2block_distance
    elif task.category == 'block2absolute':
        done = _distance(target, REGIONS[task.region]) <= config.absolute_distance
    else:
        done = _distance(target, state.blocks[task.reference].position) >= config.separate_distance

    if done:
        return 1.0
    if _distance(state.effector, target) <= config.reach_radius:
        return 0.5
    return 0.0


def _pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(size) + 0.5) / size
    return np.meshgrid(centers, 1.0 - centers)


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, radius: float) -> np.ndarray:
    if shape == 'circle':
        return dx ** 2 + dy ** 2 <= radius ** 2
    if shape == 'square':
        return (np.abs(dx) <= 0.85 * radius) & (np.abs(dy) <= 0.85 * radius)
    if shape == 'triangle':
        return (dy >= -0.7 * radius) & (dy <= radius) & (np.abs(dx) <= (radius - dy) / 1.7)
    if shape == 'moon':
        bite = (dx - 0.45 * radius) ** 2 + (dy - 0.25 * radius) ** 2 <= (0.8 * radius) ** 2
        return (dx ** 2 + dy ** 2 <= radius ** 2) & ~bite
    raise ContractViolation(f'Неизвестная форма {shape}')


def render(state: EnvState, config: Optional[EnvConfig] = None) -> np.ndarray:
    """
    Отрисовка состояния
    :param state: состояние
    :param config: параметры мира
    :return: кадр uint8 (H, W, 3)
    """
    config = config or EnvConfig()
    size = config.image_size
    xs, ys = _pixel_grid(size)

    frame = np.empty((size, size, 3), dtype=np.uint8)
    frame[...] = PALETTE['background']
    for block in state.blocks:
        mask = _shape_mask(block.shape, xs - block.position[0], ys - block.position[1], config.block_radius)
        frame[mask] = PALETTE[block.color]

    effector = (xs - state.effector[0]) ** 2 + (ys - state.effector[1]) ** 2 <= config.effector_radius ** 2
    if not effector.any():
        row = min(int((1.0 - state.effector[1]) * size), size - 1)
        col = min(int(state.effector[0] * size), size - 1)
        effector[row, col] = True
    frame[effector] = PALETTE['effector']

    return frame


def effector_centroid(frame: np.ndarray) -> Optional[Point]:
    """
    Центр масс пикселей манипулятора; для предсказанных кадров пиксели
    относятся к ближайшему цвету палитры
    :param frame: кадр (H, W, 3), uint8 или float в [0, 1]
    :return: (x, y) в координатах мира или None, если манипулятор не виден
    """
    frame = np.asarray(frame)
    values = frame.astype(np.float64)
    if frame.dtype.kind == 'f':
        values = np.clip(values, 0.0, 1.0) * 255.0

    distances = ((values[:, :, None, :] - _PALETTE_ARRAY[None, None]) ** 2).sum(axis=-1)
    rows, cols = np.nonzero(distances.argmin(axis=-1) == _EFFECTOR_INDEX)
    if rows.size == 0:
        return None

    height, width = values.shape[:2]
    return float((cols.mean() + 0.5) / width), float(1.0 - (rows.mean() + 0.5) / height)


# Скриптовый эксперт

def expert_goal(state: EnvState, task: Task) -> np.ndarray:
    """ Точка, в которую эксперт толкает целевой блок """
    target = np.array(state.blocks[task.target].position)

    if task.category == 'block2absolute':
        return np.array(REGIONS[task.region])

    reference = np.array(state.blocks[task.reference].position)
    if task.category == 'block2block':
        offset = target - reference
        norm = np.linalg.norm(offset)
        direction = offset / norm if norm > 1e-9 else np.array([1.0, 0.0])
        return reference + BLOCK2BLOCK_GOAL * direction

    xs, ys = np.meshgrid(GOAL_GRID, GOAL_GRID)
    candidates = np.stack([xs.ravel(), ys.ravel()], axis=1)
    far = candidates[np.linalg.norm(candidates - reference, axis=1) >= SEPARATE_GOAL]
    return far[np.linalg.norm(far - target, axis=1).argmin()]


def _towards(offset: np.ndarray, limit: float) -> np.ndarray:
    largest = np.abs(offset).max()
    return offset * (limit / largest) if largest > limit else offset


def expert_action(state: EnvState, task: Task, config: Optional[EnvConfig] = None,
                  noise: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Пропорциональный регулятор: подход к позе толкания позади блока (в обход блока),
    затем толкание к цели
    :param state: состояние
    :param task: задача
    :param config: параметры мира
    :param noise: генератор гауссовского шума действий; None - без шума
    :return: действие float32 (dx, dy)
    """
    config = config or EnvConfig()
    limit = config.delta_max - 2.0 * config.expert_noise
    contact = config.contact_radius
    orbit = contact + 0.03

    target = np.array(state.blocks[task.target].position)
    effector = np.array(state.effector)
    offset = expert_goal(state, task) - target
    remaining = float(np.linalg.norm(offset))

    if remaining < 1e-6:
        action = np.zeros(2)
    else:
        along = offset / remaining
        normal = np.array([-along[1], along[0]])
        pose = target - (contact + 0.01) * along
        relative = effector - target

        if np.linalg.norm(effector - pose) < 0.02:
            push = min(limit, max(remaining, 0.02))
            lateral = float(np.dot(pose - effector, normal))
            action = _towards(push * along + lateral * normal, limit)
        elif np.linalg.norm(relative) <= orbit + 0.02:
            angle = math.atan2(float(np.dot(relative, normal)), float(np.dot(relative, along)))
            if abs(abs(angle) - math.pi) < 0.35:
                action = _towards(pose - effector, limit)
            else:
                side = 1.0 if angle >= 0 else -1.0
                angle = angle + side * min(0.6, math.pi - abs(angle))
                waypoint = target + orbit * (math.cos(angle) * along + math.sin(angle) * normal)
                action = _towards(waypoint - effector, limit)
        elif _segment_clearance(effector, pose, target) >= contact + 0.005:
            action = _towards(pose - effector, limit)
        else:
            action = _towards(target + orbit * relative / np.linalg.norm(relative) - effector, limit)

    if noise is not None:
        action = action + noise.normal(0.0, config.expert_noise, size=2)

    return np.clip(action, -config.delta_max, config.delta_max).astype(np.float32)


def _segment_clearance(start: np.ndarray, end: np.ndarray, point: np.ndarray) -> float:
    segment = end - start
    length = float(np.dot(segment, segment))
    fraction = 0.0 if length == 0.0 else min(max(float(np.dot(point - start, segment)) / length, 0.0), 1.0)
    return float(np.linalg.norm(start + fraction * segment - point))


@dataclass
class Episode:
    """ Эпизод скриптового эксперта """
    task: Task
    frames: np.ndarray
    actions: np.ndarray
    score: float
    reached: bool

    @property
    def succeeded(self) -> bool:
        return self.score == 1.0


def expert_episode(seed: int, config: Optional[EnvConfig] = None, split: str = 'seen',
                   noisy: bool = True) -> Episode:
    """
    Прогон эксперта до успеха или лимита шагов
    :param seed: зерно эпизода
    :param config: параметры мира
    :param split: сплит
    :param noisy: добавлять шум действий
    :return: эпизод (T + 1 кадров, T действий)
    """
    config = config or EnvConfig()
    state, task = reset(seed, config, split)
    noise = lapa_rng.generator(seed, 'world', 'expert-noise') if noisy else None

    frames, actions = [render(state, config)], []
    score = success(state, task, config)
    reached = score > 0.0
    while score < 1.0 and state.steps < config.max_steps:
        action = expert_action(state, task, config, noise)
        state = step(state, action, config)
        frames.append(render(state, config))
        actions.append(action)
        score = success(state, task, config)
        reached = reached or score > 0.0

    return Episode(task=task, frames=np.stack(frames), actions=np.array(actions, dtype=np.float32).reshape(-1, 2),
                   score=score, reached=reached)


def replay(seed: int, actions: np.ndarray, config: Optional[EnvConfig] = None, split: str = 'seen') -> np.ndarray:
    """
    Воспроизведение кадров по зерну и списку действий
    :param seed: зерно эпизода
    :param actions: (T, 2)
    :param config: параметры мира
    :param split: сплит
    :return: кадры (T + 1, H, W, 3)
    """
    config = config or EnvConfig()
    state, _ = reset(seed, config, split)
    frames = [render(state, config)]
    for action in np.asarray(actions, dtype=np.float32):
        state = step(state, action, config)
        frames.append(render(state, config))
    return np.stack(frames)
