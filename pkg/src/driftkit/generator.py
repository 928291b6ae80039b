"""One-step conditional action-chunk generator.

A small tanh MLP maps (flattened observation history, latent) to a flattened
H x d_a action chunk in exactly one forward evaluation.  The observation
embedding activation doubles as the state feature consumed by the Stage-2
scale head, so it is returned alongside the chunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, matmul, stop_gradient, tanh
from .drift import HypothesisBatch


class SpecError(ValueError):
    """Invalid chunk geometry or generator configuration."""


@dataclass(frozen=True)
class ChunkSpec:
    """Receding-horizon geometry: predict H steps, execute H_e starting at T_o."""

    horizon: int
    action_dim: int
    history_len: int
    exec_len: int

    def __post_init__(self):
        if self.horizon < 1 or self.action_dim < 1:
            raise SpecError("horizon and action_dim must be positive")
        if not (1 <= self.history_len <= self.horizon):
            raise SpecError(f"history_len must lie in [1, {self.horizon}]")
        if not (1 <= self.exec_len <= self.horizon - self.history_len + 1):
            raise SpecError(
                f"exec_len must lie in [1, {self.horizon - self.history_len + 1}]")

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.action_dim

    @property
    def exec_dim(self) -> int:
        return self.exec_len * self.action_dim

    @property
    def exec_start(self) -> int:
        """0-based first executed step (chunk index T_o in 1-based terms)."""
        return self.history_len - 1

    def exec_slice(self) -> slice:
        """Flat-coordinate slice of the executed prefix inside the chunk."""
        lo = self.exec_start * self.action_dim
        return slice(lo, lo + self.exec_dim)

    def prefix_mask(self) -> np.ndarray:
        """Binary (H, d_a) mask selecting exactly the executed steps."""
        mask = np.zeros((self.horizon, self.action_dim))
        mask[self.exec_start:self.exec_start + self.exec_len, :] = 1.0
        return mask

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "action_dim": self.action_dim,
                "history_len": self.history_len, "exec_len": self.exec_len}

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkSpec":
        return cls(horizon=int(d["horizon"]), action_dim=int(d["action_dim"]),
                   history_len=int(d["history_len"]), exec_len=int(d["exec_len"]))


def executed_prefix(chunk: np.ndarray, spec: ChunkSpec) -> np.ndarray:
    """Slice the executed sub-window [T_o, T_o + H_e - 1] out of a chunk."""
    chunk = np.asarray(chunk, dtype=np.float64)
    grid = chunk.reshape(spec.horizon, spec.action_dim)
    return grid[spec.exec_start:spec.exec_start + spec.exec_len].copy()


PARAM_NAMES = ("obs_w", "obs_b", "lat_w", "lat_b", "trunk1_w", "trunk1_b",
               "trunk2_w", "trunk2_b", "head_w", "head_b")


class Generator:
    """The one-step backbone f(obs_hist, z) -> flattened action chunk.

    ``nfe_count`` increments once per forward evaluation; the deployment loop
    asserts exactly one evaluation per control decision against it.
    """

    def __init__(self, spec: ChunkSpec, obs_dim: int, latent_dim: int = 8,
                 hidden_dim: int = 64, seed: int = 0):
        if obs_dim < 1 or latent_dim < 1 or hidden_dim < 1:
            raise SpecError("dimensions must be positive")
        self.spec = spec
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.nfe_count = 0
        rng = np.random.default_rng(seed)
        in_obs = spec.history_len * obs_dim
        d = spec.chunk_dim
        h = hidden_dim
        self.params: dict[str, Tensor] = {}
        for name, shape, fan_in in (
            ("obs_w", (in_obs, h), in_obs), ("obs_b", (h,), None),
            ("lat_w", (latent_dim, h), latent_dim), ("lat_b", (h,), None),
            ("trunk1_w", (2 * h, h), 2 * h), ("trunk1_b", (h,), None),
            ("trunk2_w", (h, h), h), ("trunk2_b", (h,), None),
            ("head_w", (h, d), h), ("head_b", (d,), None),
        ):
            if fan_in is None:
                data = np.zeros(shape)
            else:
                data = rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape)
            self.params[name] = Tensor(data, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in PARAM_NAMES:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != self.params[name].shape:
                raise SpecError(f"parameter {name}: shape {arr.shape} "
                                f"!= expected {self.params[name].shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    def clone(self) -> "Generator":
        twin = Generator(self.spec, self.obs_dim, self.latent_dim, self.hidden_dim)
        twin.load_param_arrays(self.param_arrays())
        return twin

    # -- forward --------------------------------------------------------

    def obs_feature(self, obs_flat: Tensor) -> Tensor:
        """State-only embedding c(o); independent of the latent by construction."""
        p = self.params
        return tanh(matmul(obs_flat, p["obs_w"]) + p["obs_b"])

    def forward(self, obs_flat: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
        """One network evaluation on a batch of rows.

        Returns the (B, D) chunk batch and the (B, hidden) observation feature.
        """
        self.nfe_count += 1
        p = self.params
        feat = self.obs_feature(obs_flat)
        lat = tanh(matmul(z, p["lat_w"]) + p["lat_b"])
        h1 = tanh(matmul(concat([feat, lat], axis=1), p["trunk1_w"]) + p["trunk1_b"])
        h2 = tanh(matmul(h1, p["trunk2_w"]) + p["trunk2_b"])
        chunk = matmul(h2, p["head_w"]) + p["head_b"]
        return chunk, feat

    def generate(self, obs_hist: np.ndarray, z: np.ndarray, tau: int = 0) -> np.ndarray:
        """Deterministic single-pass chunk for one observation history.

        The generation index is part of the interface but pinned to zero;
        any other value is a configuration error.
        """
        if tau != 0:
            raise SpecError("generation index must be 0 (single-step generation)")
        obs = self._flatten_obs(obs_hist)
        z = np.asarray(z, dtype=np.float64).reshape(1, self.latent_dim)
        chunk, _ = self.forward(Tensor(obs), Tensor(z))
        return chunk.data[0].copy()

    def _flatten_obs(self, obs_hist: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs_hist, dtype=np.float64)
        expected = self.spec.history_len * self.obs_dim
        if obs.size % expected != 0:
            raise SpecError(f"observation history size {obs.size} does not "
                            f"flatten to rows of {expected}")
        return obs.reshape(-1, expected)


def sample_latents(rng: np.random.Generator, batch: int, count: int,
                   latent_dim: int) -> np.ndarray:
    """Draw (B, G, C) independent standard-normal latents."""
    return rng.standard_normal((batch, count, latent_dim))


def sample_hypotheses(generator: Generator, obs_batch: np.ndarray, count: int,
                      rng: np.random.Generator) -> tuple[HypothesisBatch, np.ndarray]:
    """Generate G hypotheses per observation from independent latents.

    All B*G rows go through a single forward evaluation; the detached copy is
    attached so the drift geometry never touches the live graph.
    """
    if count < 1:
        raise SpecError("hypothesis count must be positive")
    obs = generator._flatten_obs(obs_batch)
    b = obs.shape[0]
    latents = sample_latents(rng, b, count, generator.latent_dim)
    obs_rep = np.repeat(obs, count, axis=0)
    chunk, _ = generator.forward(Tensor(obs_rep),
                                 Tensor(latents.reshape(b * count, -1)))
    values = chunk.reshape(b, count, generator.spec.chunk_dim)
    return HypothesisBatch(values=values, detached=stop_gradient(values).data), latents
