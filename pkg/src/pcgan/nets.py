"""Encoder Q, point generator G_x, object generator G_theta and the clipped critic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Node, Param, ShapeError, Tape


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class Dense:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        self.w = Param(glorot(rng, fan_in, fan_out), f"{name}.w")
        self.b = Param(np.zeros(fan_out), f"{name}.b")

    @property
    def params(self) -> list[Param]:
        return [self.w, self.b]

    def __call__(self, tape: Tape, x: Node) -> Node:
        return tape.linear(x, tape.param(self.w), tape.param(self.b))


class MLP:
    """Dense stack; ``activation`` on every layer except the last."""

    def __init__(self, sizes: list[int], activation: str, rng: np.random.Generator, name: str):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.activation = activation
        self.layers = [Dense(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]

    @property
    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, tape: Tape, x: Node) -> Node:
        if x.value.shape[-1] != self.sizes[0]:
            raise ShapeError(f"expected trailing dimension {self.sizes[0]}, got {x.value.shape}")
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(tape, x)
            if i < last:
                x = tape.activate(x, self.activation)
        return x


class EquivariantLayer:
    """act(x_i Lambda + pool(X) Gamma + b) applied to every point of the set.

    With Gamma = gamma * Lambda this is act((x_i + gamma pool(X)) Lambda + b).
    """

    def __init__(self, fan_in: int, fan_out: int, pool: str, activation: str,
                 rng: np.random.Generator, name: str):
        if pool not in ("max", "mean"):
            raise ValueError(f"pool must be 'max' or 'mean', got {pool!r}")
        self.pool = pool
        self.activation = activation
        self.dense = Dense(fan_in, fan_out, rng, name)
        self.gamma = Param(glorot(rng, fan_in, fan_out), f"{name}.gamma")

    @property
    def params(self) -> list[Param]:
        return [self.dense.w, self.dense.b, self.gamma]

    def __call__(self, tape: Tape, x: Node) -> Node:
        n = x.value.shape[-2]
        pooled = tape.linear(tape.set_pool(x, self.pool), tape.param(self.gamma))
        h = tape.add(self.dense(tape, x), tape.broadcast_set(pooled, n))
        return tape.activate(h, self.activation)


class Encoder:
    """Inference network Q: equivariant stack, set pooling, then an MLP head."""

    def __init__(self, dim: int, widths: list[int], head: list[int], pool: str,
                 activation: str, rng: np.random.Generator, name: str = "Q"):
        self.dim = dim
        self.widths = list(widths)
        self.head_sizes = list(head)
        self.pool = pool
        self.activation = activation
        sizes = [dim] + self.widths
        self.layers = [EquivariantLayer(a, b, pool, activation, rng, f"{name}.eq{i}")
                       for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.head = MLP([sizes[-1]] + self.head_sizes, activation, rng, f"{name}.head") if self.head_sizes else None

    @property
    def out_dim(self) -> int:
        return self.head_sizes[-1] if self.head_sizes else self.widths[-1]

    @property
    def params(self) -> list[Param]:
        ps = [p for layer in self.layers for p in layer.params]
        return ps + (self.head.params if self.head else [])

    def forward(self, tape: Tape, x: Node) -> Node:
        """x: (n, dim) or (batch, n, dim) -> (out_dim,) or (batch, out_dim)."""
        if x.value.ndim < 2 or x.value.shape[-1] != self.dim:
            raise ShapeError(f"encoder expects (..., n, {self.dim}) points, got {x.value.shape}")
        if x.value.shape[-2] == 0:
            raise ShapeError("cannot encode an empty point cloud")
        for layer in self.layers:
            x = layer(tape, x)
        x = tape.set_pool(x, self.pool)
        return self.head.forward(tape, x) if self.head else x


class PointGenerator:
    """G_x: maps [z ; psi] to a point."""

    def __init__(self, dim: int, noise_dim: int, code_dim: int, hidden: list[int],
                 activation: str, rng: np.random.Generator, name: str = "Gx"):
        self.dim, self.noise_dim, self.code_dim = dim, noise_dim, code_dim
        self.mlp = MLP([noise_dim + code_dim] + list(hidden) + [dim], activation, rng, name)

    @property
    def params(self) -> list[Param]:
        return self.mlp.params

    def forward(self, tape: Tape, z: Node, psi: Node) -> Node:
        """z: (..., n, noise_dim); psi: (..., code_dim) shared across the n points."""
        if psi.value.shape[-1] != self.code_dim:
            raise ShapeError(f"code has size {psi.value.shape[-1]}, generator expects {self.code_dim}")
        if z.value.shape[:-2] != psi.value.shape[:-1]:
            raise ShapeError(f"noise {z.value.shape} and code {psi.value.shape} disagree on batch shape")
        codes = tape.broadcast_set(psi, z.value.shape[-2])
        return self.mlp.forward(tape, tape.concat([z, codes]))


class ObjectGenerator:
    """G_theta: maps object noise u to a latent code psi."""

    def __init__(self, noise_dim: int, code_dim: int, hidden: list[int], activation: str,
                 rng: np.random.Generator, name: str = "Gtheta"):
        self.noise_dim, self.code_dim = noise_dim, code_dim
        self.mlp = MLP([noise_dim] + list(hidden) + [code_dim], activation, rng, name)

    @property
    def params(self) -> list[Param]:
        return self.mlp.params

    def forward(self, tape: Tape, u: Node) -> Node:
        return self.mlp.forward(tape, u)


class Critic:
    """Scalar critic f(x) or f(x, psi) kept inside the clip box [-c, c].

    ``cond_dim`` extra input columns carry a conditioning code; the Lipschitz
    bound is taken with respect to the point coordinates only.
    """

    def __init__(self, dim: int, hidden: list[int], activation: str, rng: np.random.Generator,
                 clip: float = 0.5, cond_dim: int = 0, name: str = "critic"):
        self.dim, self.cond_dim = dim, cond_dim
        self.mlp = MLP([dim + cond_dim] + list(hidden) + [1], activation, rng, name)
        self.clip = clip
        self.lipschitz = self.clip_bound(clip)

    @property
    def params(self) -> list[Param]:
        return self.mlp.params

    def clip_bound(self, c: float) -> float:
        # per layer c*fan_in bounds the inf->inf operator norm; |.|_inf <= |.|_1 on the input
        fan_ins = [self.dim] + self.mlp.sizes[1:-1]
        return float(np.prod([c * f for f in fan_ins]))

    def clip_weights(self, c: float | None = None) -> None:
        c = self.clip if c is None else c
        if not c > 0:
            raise ValueError(f"clip range must be positive, got {c}")
        for p in self.params:
            np.clip(p.value, -c, c, out=p.value)
        self.clip = c
        self.lipschitz = self.clip_bound(c)

    def forward(self, tape: Tape, x: Node, cond: Node | None = None) -> Node:
        """x: (..., n, dim) -> scores of shape (..., n)."""
        if x.value.shape[-1] != self.dim:
            raise ShapeError(f"critic expects points of dimension {self.dim}, got {x.value.shape}")
        if self.cond_dim:
            if cond is None:
                raise ShapeError("conditional critic needs a code")
            x = tape.concat([x, tape.broadcast_set(cond, x.value.shape[-2])])
        out = self.mlp.forward(tape, x)
        return _drop_last(tape, out)


def _drop_last(tape: Tape, x: Node) -> Node:
    shape = x.value.shape
    return tape._push(x.value[..., 0], (x,), lambda g: (g.reshape(shape),))


@dataclass
class Architecture:
    """Layer sizes for one experiment family."""

    dim: int = 2
    noise_dim: int = 10
    code_dim: int = 15
    object_noise_dim: int = 10
    encoder_widths: list[int] = field(default_factory=lambda: [30, 30, 15])
    encoder_head: list[int] = field(default_factory=lambda: [15])
    encoder_pool: str = "mean"
    generator_hidden: list[int] = field(default_factory=lambda: [30, 30, 30, 30])
    critic_hidden: list[int] = field(default_factory=lambda: [30, 30, 30])
    object_generator_hidden: list[int] = field(default_factory=lambda: [30, 30, 30, 30])
    code_critic_hidden: list[int] = field(default_factory=lambda: [30, 30, 30, 30])
    activation: str = "softplus"
    conditional_critic: bool = True

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("point dimension must be 2 or 3")
        out = self.encoder_head[-1] if self.encoder_head else self.encoder_widths[-1]
        if out != self.code_dim:
            raise ValueError(f"encoder output {out} != code_dim {self.code_dim}")
        if self.object_noise_dim > self.code_dim:
            raise ValueError("object noise dimension must not exceed code dimension")


PRESETS = {
    "circles": dict(dim=2, code_dim=15, encoder_widths=[30, 30, 15], encoder_head=[15],
                    encoder_pool="mean", generator_hidden=[30, 30, 30, 30], critic_hidden=[30, 30, 30],
                    object_generator_hidden=[30, 30, 30, 30], code_critic_hidden=[30, 30, 30, 30],
                    activation="softplus"),
    "modelnet-single": dict(dim=3, code_dim=128, encoder_widths=[128, 128, 128], encoder_head=[128, 128],
                            encoder_pool="max", generator_hidden=[128, 128, 128], critic_hidden=[128, 128, 128],
                            object_generator_hidden=[256, 256, 256, 256],
                            code_critic_hidden=[256, 256, 256, 256], activation="leaky_relu"),
    "modelnet-all": dict(dim=3, code_dim=256, encoder_widths=[256, 256, 256], encoder_head=[256, 256],
                         encoder_pool="max", generator_hidden=[256, 256, 256, 256],
                         critic_hidden=[256, 256, 256, 256], object_generator_hidden=[256, 256, 256, 256],
                         code_critic_hidden=[256, 256, 256, 256], activation="leaky_relu"),
}


def preset(name: str, **overrides) -> Architecture:
    if name not in PRESETS:
        raise KeyError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
    return Architecture(**{**PRESETS[name], **overrides})


class PCGAN:
    """The four networks plus their architecture record."""

    def __init__(self, arch: Architecture, seed: int = 0, clip: float = 0.5):
        self.arch = arch
        rng = np.random.default_rng(seed)
        a = arch
        self.encoder = Encoder(a.dim, a.encoder_widths, a.encoder_head, a.encoder_pool, a.activation, rng)
        self.generator = PointGenerator(a.dim, a.noise_dim, a.code_dim, a.generator_hidden, a.activation, rng)
        self.critic = Critic(a.dim, a.critic_hidden, a.activation, rng, clip=clip,
                             cond_dim=a.code_dim if a.conditional_critic else 0)
        self.object_generator = ObjectGenerator(a.object_noise_dim, a.code_dim, a.object_generator_hidden,
                                                a.activation, rng)
        self.code_critic = Critic(a.code_dim, a.code_critic_hidden, a.activation, rng, clip=clip, name="code_critic")
        self.critic.clip_weights()
        self.code_critic.clip_weights()
        self.object_generator_trained = False
        self.conditional_trained = False

    def networks(self) -> dict:
        return {"encoder": self.encoder, "generator": self.generator, "critic": self.critic,
                "object_generator": self.object_generator, "code_critic": self.code_critic}


def encode(q: Encoder, cloud) -> np.ndarray:
    """Latent code of one cloud (n, d) or a batch (b, n, d)."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim < 2 or cloud.shape[-2] == 0:
        raise ShapeError("cannot encode an empty point cloud")
    tape = Tape(record=False)
    return q.forward(tape, tape.input(cloud)).value


def generate_points(gx: PointGenerator, code, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points G_x(z_i, psi) with i.i.d. standard normal z_i."""
    if n < 1:
        raise ValueError(f"need n >= 1 points, got {n}")
    code = np.asarray(code, dtype=np.float64)
    z = rng.standard_normal(code.shape[:-1] + (n, gx.noise_dim))
    tape = Tape(record=False)
    return gx.forward(tape, tape.input(z), tape.input(code)).value


def sample_codes(g_theta: ObjectGenerator, count: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal((count, g_theta.noise_dim))
    tape = Tape(record=False)
    return g_theta.forward(tape, tape.input(u)).value


def hierarchical_sample(model: PCGAN, n: int, rng: np.random.Generator, u=None) -> np.ndarray:
    """One cloud: u -> psi = G_theta(u) -> n points G_x(z_i, psi)."""
    if n < 1:
        raise ValueError(f"need n >= 1 points, got {n}")
    if not (model.object_generator_trained and model.conditional_trained):
        raise RuntimeError("hierarchical sampling needs trained conditional and object generators")
    if u is None:
        u = rng.standard_normal(model.object_generator.noise_dim)
    tape = Tape(record=False)
    psi = model.object_generator.forward(tape, tape.input(np.asarray(u, dtype=np.float64)))
    return generate_points(model.generator, psi.value, n, rng)


def critic_score(f: Critic, points, cond=None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    tape = Tape(record=False)
    c = tape.input(cond) if cond is not None else None
    return f.forward(tape, tape.input(points), c).value
