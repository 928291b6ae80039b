"""Desk-scale tasks: a deterministic planar point-mass reach environment with
receding-horizon stepping, plus synthetic multimodal imitation datasets whose
expert chunks come from scripted goal-reaching controllers that swerve left or
right on the way in.

Observation layout per micro-step is (position, goal, last action), d_o = 6.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .generator import ChunkSpec, SpecError

OBS_DIM = 6
ACTION_DIM = 2

ARENA_HALF_WIDTH = 1.0
DT = 0.1
SUCCESS_THRESHOLD = 0.05
EPISODE_CAP = 120
MIN_START_DISTANCE = 0.4

SCRIPTED_GAIN = 3.0


class EnvError(RuntimeError):
    pass


def _observe(pos: np.ndarray, goal: np.ndarray, last_action: np.ndarray) -> np.ndarray:
    return np.concatenate([pos, goal, last_action])


class PointMassEnv:
    """Velocity-command point mass: pos += a * dt inside [-1, 1]^2.

    Dense reward is -dist(pos, goal) per micro-step; sparse reward pays 1 once
    the success threshold is reached.  Episodes end on success or at the
    micro-step cap.  reset(seed) is bitwise reproducible.
    """

    def __init__(self, spec: ChunkSpec, reward_mode: str = "dense",
                 dt: float = DT, threshold: float = SUCCESS_THRESHOLD,
                 episode_cap: int = EPISODE_CAP):
        if reward_mode not in ("dense", "sparse"):
            raise EnvError(f"unknown reward mode {reward_mode!r}")
        if spec.action_dim != ACTION_DIM:
            raise EnvError("point-mass actions are planar (action_dim must be 2)")
        self.spec = spec
        self.reward_mode = reward_mode
        self.dt = dt
        self.threshold = threshold
        self.episode_cap = episode_cap
        self.pos = np.zeros(2)
        self.goal = np.zeros(2)
        self.last_action = np.zeros(2)
        self.t = 0
        self.done = True
        self.succeeded = False
        self._history: list[np.ndarray] = []

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.pos, self.goal = sample_start_goal(rng)
        self.last_action = np.zeros(2)
        self.t = 0
        self.done = False
        self.succeeded = False
        obs = _observe(self.pos, self.goal, self.last_action)
        self._history = [obs.copy() for _ in range(self.spec.history_len)]
        return self.obs_history()

    def obs_history(self) -> np.ndarray:
        return np.stack(self._history[-self.spec.history_len:])

    def micro_step(self, action: np.ndarray) -> tuple[float, bool]:
        if self.done:
            raise EnvError("step after episode end")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self.pos = np.clip(self.pos + a * self.dt,
                           -ARENA_HALF_WIDTH, ARENA_HALF_WIDTH)
        self.last_action = a
        self.t += 1
        dist = float(np.linalg.norm(self.pos - self.goal))
        success = dist <= self.threshold
        if self.reward_mode == "dense":
            reward = -dist
        else:
            reward = 1.0 if success else 0.0
        if success:
            self.succeeded = True
        self.done = success or self.t >= self.episode_cap
        self._history.append(_observe(self.pos, self.goal, self.last_action))
        return reward, self.done

    def step_prefix(self, prefix: np.ndarray) -> tuple[np.ndarray, float, bool]:
        """Apply all H_e micro-steps of an executed prefix, summing rewards."""
        prefix = np.asarray(prefix, dtype=np.float64).reshape(-1, ACTION_DIM)
        total = 0.0
        done = self.done
        for action in prefix:
            reward, done = self.micro_step(action)
            total += reward
            if done:
                break
        return self.obs_history(), total, done


def sample_start_goal(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform start and goal with a minimum separation so episodes are non-trivial."""
    while True:
        pos = rng.uniform(-0.9, 0.9, size=2)
        goal = rng.uniform(-0.9, 0.9, size=2)
        if np.linalg.norm(pos - goal) >= MIN_START_DISTANCE:
            return pos, goal


def scripted_action(pos: np.ndarray, goal: np.ndarray,
                    gain: float = SCRIPTED_GAIN) -> np.ndarray:
    """Straight-to-goal proportional controller, the optimal baseline."""
    return np.clip(gain * (goal - pos), -1.0, 1.0)


# -- multimodal demonstrations ------------------------------------------


@dataclass
class ImitationDataset:
    """Paired (observation history, expert chunk) records with mode labels."""

    observations: np.ndarray  # (N, T_o, d_o)
    chunks: np.ndarray        # (N, H, d_a)
    modes: np.ndarray         # (N,) int labels
    spec: ChunkSpec
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.observations.shape[0]


def mode_signs(n_modes: int) -> np.ndarray:
    """Per-mode lateral swerve factors in [-1, 1], symmetric around zero."""
    if n_modes == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n_modes)


MODE_SPEED_CAP = 0.6


def mode_action(pos: np.ndarray, goal: np.ndarray, step: int, sign: float,
                gain: float, swing_amp: float, swing_len: int) -> np.ndarray:
    """Goal-reaching action with an early lateral swerve of the given sign.

    The approach term is norm-capped below the action bounds so the swerve is
    never clipped away; the two swerve signs therefore produce distinct chunks
    from any start state.
    """
    to_goal = goal - pos
    dist = float(np.linalg.norm(to_goal))
    if dist < 1e-12:
        return np.zeros(2)
    direction = to_goal / dist
    base = gain * to_goal
    speed = float(np.linalg.norm(base))
    if speed > MODE_SPEED_CAP:
        base = base * (MODE_SPEED_CAP / speed)
    perp = np.array([-direction[1], direction[0]])
    swing = 0.0
    if step < swing_len:
        swing = swing_amp * np.sin(np.pi * (step + 1) / (swing_len + 1))
    return np.clip(base + sign * swing * perp, -1.0, 1.0)


def rollout_mode_chunk(pos: np.ndarray, goal: np.ndarray, spec: ChunkSpec,
                       sign: float, gain: float, swing_amp: float,
                       swing_len: int) -> np.ndarray:
    """Noiseless H-step expert chunk: simulate the mode controller forward."""
    p = np.asarray(pos, dtype=np.float64).copy()
    actions = np.zeros((spec.horizon, ACTION_DIM))
    for h in range(spec.horizon):
        a = mode_action(p, goal, h, sign, gain, swing_amp, swing_len)
        actions[h] = a
        p = np.clip(p + a * DT, -ARENA_HALF_WIDTH, ARENA_HALF_WIDTH)
    return actions


def synth_multimodal(modes: int, conditions: int, samples_per_condition: int = 1,
                     noise: float = 0.01, seed: int = 0,
                     spec: ChunkSpec | None = None, gain: float = SCRIPTED_GAIN,
                     swing_amp: float = 0.5, swing_len: int = 8,
                     warmup_max: int = 8) -> ImitationDataset:
    """Synthesize goal-reaching demonstrations with K swerve modes.

    Each condition is a point-mass state reached by warming up the controller
    for a random number of micro-steps, so histories carry realistic past
    actions.  Every sample for a condition draws one of the K modes uniformly
    and adds Gaussian jitter to the noiseless mode chunk.
    """
    if modes < 1:
        raise SpecError("modes must be >= 1")
    spec = spec or ChunkSpec(horizon=16, action_dim=2, history_len=2, exec_len=8)
    signs = mode_signs(modes)
    rng = np.random.default_rng(seed)
    obs_rows, chunk_rows, mode_rows = [], [], []
    for _ in range(conditions):
        pos, goal = sample_start_goal(rng)
        warm = int(rng.integers(0, warmup_max + 1))
        warm_sign = signs[int(rng.integers(0, modes))]
        history = [_observe(pos, goal, np.zeros(2))] * spec.history_len
        last = np.zeros(2)
        for step in range(warm):
            last = mode_action(pos, goal, step, warm_sign, gain, swing_amp, swing_len)
            pos = np.clip(pos + last * DT, -ARENA_HALF_WIDTH, ARENA_HALF_WIDTH)
            history.append(_observe(pos, goal, last))
        obs_hist = np.stack(history[-spec.history_len:])
        for _ in range(samples_per_condition):
            k = int(rng.integers(0, modes))
            chunk = rollout_mode_chunk(pos, goal, spec, signs[k], gain,
                                       swing_amp, swing_len)
            if noise > 0:
                chunk = chunk + rng.normal(scale=noise, size=chunk.shape)
            obs_rows.append(obs_hist)
            chunk_rows.append(np.clip(chunk, -1.0, 1.0))
            mode_rows.append(k)
    metadata = {
        "modes": modes,
        "mode_signs": signs.tolist(),
        "conditions": conditions,
        "samples_per_condition": samples_per_condition,
        "noise": noise,
        "seed": seed,
        "gain": gain,
        "swing_amp": swing_amp,
        "swing_len": swing_len,
        "warmup_max": warmup_max,
        "obs_dim": OBS_DIM,
        "chunk_spec": spec.to_dict(),
    }
    return ImitationDataset(
        observations=np.stack(obs_rows),
        chunks=np.stack(chunk_rows),
        modes=np.asarray(mode_rows, dtype=np.int64),
        spec=spec,
        metadata=metadata,
    )


def mode_centers_for(obs_hist: np.ndarray, metadata: dict) -> np.ndarray:
    """The K noiseless mode chunks for one condition, flattened to (K, D).

    The condition state (position, goal) is read off the newest history row;
    centers are recomputed from the stored synthesis parameters.
    """
    spec = ChunkSpec.from_dict(metadata["chunk_spec"])
    newest = np.asarray(obs_hist)[-1]
    pos, goal = newest[0:2], newest[2:4]
    centers = []
    for sign in metadata["mode_signs"]:
        chunk = rollout_mode_chunk(pos, goal, spec, sign,
                                   metadata["gain"], metadata["swing_amp"],
                                   metadata["swing_len"])
        centers.append(chunk.reshape(-1))
    return np.stack(centers)


def mode_coverage(policy_fn, dataset: ImitationDataset, samples: int,
                  rng: np.random.Generator, max_conditions: int | None = None) -> float:
    """Fraction of distinct expert modes reached by sampled policy chunks.

    For every test condition, draw ``samples`` latents, assign each generated
    chunk to the nearest mode center, and average the per-condition fraction
    of modes hit.
    """
    if "mode_signs" not in dataset.metadata:
        raise SpecError("dataset lacks mode metadata")
    n_modes = dataset.metadata["modes"]
    seen_conditions = set()
    fractions = []
    for i in range(len(dataset)):
        key = dataset.observations[i].tobytes()
        if key in seen_conditions:
            continue
        seen_conditions.add(key)
        if max_conditions is not None and len(fractions) >= max_conditions:
            break
        centers = mode_centers_for(dataset.observations[i], dataset.metadata)
        chunks = policy_fn(dataset.observations[i], samples, rng)
        diffs = chunks[:, None, :] - centers[None, :, :]
        nearest = np.argmin(np.sqrt(np.square(diffs).sum(axis=-1)), axis=1)
        fractions.append(len(np.unique(nearest)) / n_modes)
    return float(np.mean(fractions))


# -- persistence ---------------------------------------------------------


def save_dataset(dataset: ImitationDataset, csv_path, meta_path) -> None:
    """CSV of flattened records plus a JSON sidecar with synthesis metadata."""
    n = len(dataset)
    t_o, d_o = dataset.observations.shape[1:]
    d = dataset.spec.chunk_dim
    header = ([f"obs_{i}" for i in range(t_o * d_o)]
              + [f"act_{i}" for i in range(d)] + ["mode"])
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            row = [repr(float(v)) for v in dataset.observations[i].reshape(-1)]
            row += [repr(float(v)) for v in dataset.chunks[i].reshape(-1)]
            row.append(int(dataset.modes[i]))
            writer.writerow(row)
    with open(meta_path, "w") as fh:
        json.dump(dataset.metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(csv_path, meta_path) -> ImitationDataset:
    with open(meta_path) as fh:
        metadata = json.load(fh)
    spec = ChunkSpec.from_dict(metadata["chunk_spec"])
    d_o = metadata["obs_dim"]
    t_o = spec.history_len
    obs_rows, chunk_rows, mode_rows = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = t_o * d_o + spec.chunk_dim + 1
        if len(header) != expected:
            raise SpecError(f"dataset has {len(header)} columns, expected {expected}")
        for row in reader:
            vals = [float(v) for v in row[:-1]]
            obs_rows.append(np.array(vals[:t_o * d_o]).reshape(t_o, d_o))
            chunk_rows.append(np.array(vals[t_o * d_o:]).reshape(
                spec.horizon, spec.action_dim))
            mode_rows.append(int(row[-1]))
    return ImitationDataset(
        observations=np.stack(obs_rows) if obs_rows else np.zeros((0, t_o, d_o)),
        chunks=np.stack(chunk_rows) if chunk_rows else np.zeros(
            (0, spec.horizon, spec.action_dim)),
        modes=np.asarray(mode_rows, dtype=np.int64),
        spec=spec,
        metadata=metadata,
    )
