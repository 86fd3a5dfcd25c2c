"""Two-stage training: conditional generation (Q, G_x, critic), then G_theta on inferred codes."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as pdata
from .diffcore import Adam, NonFiniteError, Tape, backward, load_params, restore_params, save_params
from .losses import DEFAULT_LAMBDA, LowerBoundConfig, critic_update, sandwich_loss, w_lower_value
from .metrics import coverage, d2f, fit_circle, ks_statistic, uniform_cdf
from .nets import PCGAN, Architecture, encode, generate_points, preset, sample_codes
from .ot import AuctionConfig, auction_assign, batch_assign

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "w_upper", "w_lower", "sandwich", "critic_objective", "k"]
NETWORK_FILES = ("encoder", "generator", "critic", "object_generator", "code_critic")
CIRCLE_RADIUS_RANGE = (1.6, 6.4)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "conditional"
    manifest: str = ""
    out_dir: str = "run"
    preset: str = "circles"
    activation: str = ""               # empty: the preset's activation
    seed: int = 0
    steps: int = 2000
    batch_size: int = 64
    points_per_object: int = 100
    lam: float = DEFAULT_LAMBDA
    critic_steps: int = 5
    clip: float = 0.5
    rho: float = 1.0
    lr: float = 1e-4
    critic_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    auction_eps_rel: float = 0.05
    auction_scaling: bool = False
    auction_per_point: bool = False
    normalize: str = "none"           # "none" or "dataset" (zero mean, unit global variance)
    augment_rotations: bool = False
    checkpoint_every: int = 0          # 0: only at the end
    # stage 2
    stage1_checkpoint: str = ""
    code_lam: float = 1.0               # 1.0: pure lower-bound GAN on codes
    conditional_critic: bool = True

    def __post_init__(self):
        if self.stage not in ("conditional", "hierarchical"):
            raise ValueError(f"stage must be 'conditional' or 'hierarchical', got {self.stage!r}")
        for name in ("steps", "batch_size", "points_per_object", "critic_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lam", "code_lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.normalize not in ("dataset", "none"):
            raise ValueError("normalize must be 'dataset' or 'none'")

    @property
    def auction(self) -> AuctionConfig:
        return AuctionConfig(eps_rel=self.auction_eps_rel, scaling=self.auction_scaling,
                             per_point=self.auction_per_point)

    @property
    def lower(self) -> LowerBoundConfig:
        return LowerBoundConfig(critic_steps=self.critic_steps, clip=self.clip, rho=self.rho)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ValueError(f"unknown config field {key!r}")
            kwargs[key] = _coerce(names[key].type, raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_mapping(json.loads(text))
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls.from_mapping(values)


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    t = str(type_name)
    if t == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        if "/" in raw:
            num, den = raw.split("/", 1)
            return float(num) / float(den)
        return float(raw)
    return raw


@dataclass
class TrainReport:
    w_upper: list[float] = field(default_factory=list)
    w_lower: list[float] = field(default_factory=list)
    sandwich: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str = ""


# checkpoints

def save_checkpoint(model: PCGAN, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nets = model.networks()
    layers = {name: [[p.name, list(p.shape)] for p in net.params] for name, net in nets.items()}
    manifest = {
        "format": "pcgan-checkpoint",
        "version": 1,
        "architecture": dataclasses.asdict(model.arch),
        "dims": {"d": model.arch.dim, "d1": model.arch.noise_dim, "d2": model.arch.code_dim,
                 "d3": model.arch.object_noise_dim},
        "pool": model.arch.encoder_pool,
        "layers": layers,
        "clip": model.critic.clip,
        "conditional_trained": model.conditional_trained,
        "object_generator_trained": model.object_generator_trained,
    }
    manifest.update(extra or {})
    for name in NETWORK_FILES:
        save_params(out / f"{name}.params", nets[name].params)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_checkpoint(path) -> tuple[PCGAN, dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    arch = Architecture(**manifest["architecture"])
    model = PCGAN(arch, seed=0, clip=manifest["clip"])
    for name, net in model.networks().items():
        restore_params(net.params, load_params(path / f"{name}.params"))
    model.critic.clip_weights(manifest["clip"])
    model.code_critic.clip_weights(manifest["clip"])
    model.conditional_trained = manifest["conditional_trained"]
    model.object_generator_trained = manifest["object_generator_trained"]
    return model, manifest


# data

def _load_clouds(manifest) -> tuple[list[np.ndarray], list[pdata.ManifestItem]]:
    items = pdata.read_manifest(manifest)
    clouds = [pdata.load_cloud(it.path) for it in items]
    return clouds, items


def _subsample(cloud: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(cloud) == n:
        return cloud
    idx = rng.choice(len(cloud), size=n, replace=len(cloud) < n)
    return cloud[idx]


def _batch(clouds, n, batch_size, rng, augment: bool) -> np.ndarray:
    idx = rng.choice(len(clouds), size=batch_size, replace=len(clouds) < batch_size)
    X = np.stack([_subsample(clouds[i], n, rng) for i in idx])
    if augment:
        angles = rng.choice(pdata.ROTATION_ANGLES, size=batch_size)
        X = np.stack([pdata.rotate_xy(x, a) for x, a in zip(X, angles)])
    return X


class _LogWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(LOG_FIELDS)

    def row(self, values) -> None:
        self.w.writerow([values[0]] + [repr(float(v)) for v in values[1:]])

    def close(self) -> None:
        self.fh.close()


def _check_finite(value: float, what: str, model: PCGAN, out: Path, extra: dict) -> None:
    if not np.isfinite(value):
        save_checkpoint(model, out, extra)
        raise TrainingError(f"non-finite {what}; last good weights saved to {out}")


def _recorded_config(config: TrainConfig) -> dict:
    """Config as stored in checkpoints; run-local paths are left out so runs compare byte for byte."""
    d = dataclasses.asdict(config)
    d.pop("out_dir")
    d.pop("stage1_checkpoint")
    return d


# stage 1

def train_conditional(config: TrainConfig, model: PCGAN | None = None) -> TrainReport:
    """Jointly train Q and G_x against the sandwiched objective, the critic by clipped ascent."""
    start = time.perf_counter()
    clouds, items = _load_clouds(config.manifest)
    dims = {c.shape[1] for c in clouds}
    if len(dims) != 1:
        raise pdata.DataError("clouds in the manifest have mixed dimensions")
    dim = dims.pop()
    if model is None:
        overrides = {"activation": config.activation} if config.activation else {}
        arch = preset(config.preset, conditional_critic=config.conditional_critic, **overrides)
        if arch.dim != dim:
            raise pdata.DataError(f"preset {config.preset!r} expects {arch.dim}D points, data is {dim}D")
        model = PCGAN(arch, seed=config.seed, clip=config.clip)
    # reporting units are fixed by the training set whether or not training itself is normalized
    units = pdata.fit_normalization(np.concatenate(clouds))
    norm = units if config.normalize == "dataset" else None
    if norm is not None:
        clouds = [norm.apply(c) for c in clouds]
    extra = {"normalization": norm.to_json() if norm else None, "units": units.to_json(),
             "train_config": _recorded_config(config)}

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng((config.seed, 1))
    gen_params = model.encoder.params + model.generator.params
    opt_g = Adam(gen_params, config.lr, config.beta1, config.beta2)
    opt_c = Adam(model.critic.params, config.critic_lr, config.beta1, config.beta2)
    lower = config.lower
    auction = config.auction
    lam = config.lam
    critic, gx, q = model.critic, model.generator, model.encoder
    cond_critic = critic.cond_dim > 0
    n = config.points_per_object
    report = TrainReport()
    writer = _LogWriter(out / "train_log.csv")
    try:
        for step in range(1, config.steps + 1):
            X = _batch(clouds, n, config.batch_size, rng, config.augment_rotations)
            psi = encode(q, X)
            cond = psi if cond_critic else None
            crit_obj = 0.0
            if lam > 0:
                for _ in range(lower.critic_steps):
                    fake = generate_points(gx, psi, n, rng)
                    crit_obj = critic_update(critic, opt_c, X, fake, lower, cond)
                    _check_finite(crit_obj, "critic objective", model, out, extra)

            tape = Tape()
            psi_node = q.forward(tape, tape.input(X))
            z = tape.input(rng.standard_normal(X.shape[:2] + (gx.noise_dim,)))
            fake = gx.forward(tape, z, psi_node)
            perms, avgs = batch_assign(X, fake.value, auction)
            target = np.take_along_axis(X, perms[..., None], axis=1)
            w_u_node = tape.scale(tape.mean(tape.abs(tape.sub(fake, tape.input(target)))), float(dim))
            real_mean = float(w_lower_critic_mean(critic, X, cond))
            fg = critic.forward(tape, fake, tape.input(cond) if cond_critic else None)
            w_l_node = tape.shift(tape.scale(tape.mean(fg), -1.0), real_mean)
            loss = tape.add(tape.scale(w_u_node, 1.0 - lam), tape.scale(w_l_node, lam))
            w_u, w_l = float(w_u_node.value), float(w_l_node.value)
            total = sandwich_loss(w_u, w_l, lam)
            _check_finite(total, "generator loss", model, out, extra)
            backward(tape, loss)
            for p in critic.params:
                p.zero_grad()
            opt_g.step()

            report.w_upper.append(w_u)
            report.w_lower.append(w_l)
            report.sandwich.append(total)
            writer.row([step, w_u, w_l, total, crit_obj, critic.lipschitz])
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(model, out, extra)
    finally:
        writer.close()
    model.conditional_trained = True
    save_checkpoint(model, out, extra)
    report.wall_time = time.perf_counter() - start
    report.checkpoint = str(out)
    return report


def w_lower_critic_mean(critic, X, cond) -> float:
    tape = Tape(record=False)
    c = tape.input(cond) if cond is not None else None
    return float(critic.forward(tape, tape.input(X), c).value.mean())


# stage 2

def train_hierarchical(config: TrainConfig) -> TrainReport:
    """Train G_theta on codes collected once from the frozen encoder."""
    start = time.perf_counter()
    ckpt = Path(config.stage1_checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"stage-1 checkpoint not found at {ckpt}")
    model, manifest = load_checkpoint(ckpt)
    if not model.conditional_trained:
        raise TrainingError("stage-1 checkpoint has not been trained")
    clouds, _ = _load_clouds(config.manifest)
    norm = pdata.Normalization.from_json(manifest["normalization"]) if manifest.get("normalization") else None
    if norm is not None:
        clouds = [norm.apply(c) for c in clouds]
    codes = np.stack([encode(model.encoder, c) for c in clouds])
    code_mean = codes.mean(axis=0)
    code_std = codes.std(axis=0)
    code_std[code_std == 0] = 1.0
    target = (codes - code_mean) / code_std

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng((config.seed, 2))
    g, f = model.object_generator, model.code_critic
    opt_g = Adam(g.params, config.lr, config.beta1, config.beta2)
    opt_c = Adam(f.params, config.critic_lr, config.beta1, config.beta2)
    lower = config.lower
    lam = config.code_lam
    auction = config.auction
    bsz = min(config.batch_size, len(target))
    report = TrainReport()
    extra = {k: v for k, v in manifest.items() if k in ("normalization", "units", "train_config")}
    extra["code_standardization"] = {"mean": code_mean.tolist(), "std": code_std.tolist()}
    extra["hierarchical_config"] = _recorded_config(config)
    writer = _LogWriter(out / "train_log.csv")
    try:
        for step in range(1, config.steps + 1):
            real = target[rng.choice(len(target), size=bsz, replace=False)][None]
            crit_obj = 0.0
            if lam > 0:
                for _ in range(lower.critic_steps):
                    fake = sample_codes(g, bsz, rng)[None]
                    crit_obj = critic_update(f, opt_c, real, fake, lower)
                    _check_finite(crit_obj, "critic objective", model, out, extra)
            tape = Tape()
            fake = g.forward(tape, tape.input(rng.standard_normal((1, bsz, g.noise_dim))))
            perms, _ = batch_assign(real, fake.value, auction)
            matched = np.take_along_axis(real, perms[..., None], axis=1)
            w_u_node = tape.scale(tape.mean(tape.abs(tape.sub(fake, tape.input(matched)))), float(g.code_dim))
            real_mean = w_lower_critic_mean(f, real, None)
            w_l_node = tape.shift(tape.scale(tape.mean(f.forward(tape, fake)), -1.0), real_mean)
            loss = tape.add(tape.scale(w_u_node, 1.0 - lam), tape.scale(w_l_node, lam))
            w_u, w_l = float(w_u_node.value), float(w_l_node.value)
            total = sandwich_loss(w_u, w_l, lam)
            _check_finite(total, "generator loss", model, out, extra)
            backward(tape, loss)
            for p in f.params:
                p.zero_grad()
            opt_g.step()
            report.w_upper.append(w_u)
            report.w_lower.append(w_l)
            report.sandwich.append(total)
            writer.row([step, w_u, w_l, total, crit_obj, f.lipschitz])
    finally:
        writer.close()
    # fold the code standardisation into the last layer so G_theta emits raw codes
    last = g.mlp.layers[-1]
    last.w.assign(last.w.value * code_std)
    last.b.assign(last.b.value * code_std + code_mean)
    model.object_generator_trained = True
    save_checkpoint(model, out, extra)
    report.wall_time = time.perf_counter() - start
    report.checkpoint = str(out)
    return report


def train(config: TrainConfig) -> TrainReport:
    if config.stage == "conditional":
        return train_conditional(config)
    return train_hierarchical(config)


# evaluation

@dataclass
class EvalSummary:
    rows: list[dict]
    ks_radius: float | None = None
    quadrant_fractions: list[float] | None = None
    quadrant_hits: int | None = None
    median_w_upper: float | None = None
    mean_d2f: float | None = None
    mean_coverage: float | None = None


def eval_reconstruction(checkpoint, manifest, out_csv=None, n_generate: int | None = None,
                        seed: int = 0, cov_threshold: float = np.inf,
                        auction: AuctionConfig | None = None) -> EvalSummary:
    """Encode each test cloud, regenerate it and score the reconstruction."""
    model, cmanifest = load_checkpoint(checkpoint)
    if not model.conditional_trained:
        raise TrainingError("checkpoint has no trained conditional generator")
    clouds, items = _load_clouds(manifest)
    norm = pdata.Normalization.from_json(cmanifest["normalization"]) if cmanifest.get("normalization") else None
    units = pdata.Normalization.from_json(cmanifest["units"]) if cmanifest.get("units") else None
    dim = model.arch.dim
    n_generate = n_generate or (500 if dim == 2 else 2048)
    rng = np.random.default_rng((seed, 3))
    rows = []
    for k, (cloud, item) in enumerate(zip(clouds, items)):
        if cloud.shape[1] != dim:
            raise pdata.DataError(f"{item.path}: {cloud.shape[1]}D cloud, model is {dim}D")
        x = norm.apply(cloud) if norm else cloud
        psi = encode(model.encoder, x)
        gen = generate_points(model.generator, psi, n_generate, rng)
        match = generate_points(model.generator, psi, len(x), rng)
        w_u = auction_assign(x, match, auction).average
        if norm is None and units is not None:
            w_u /= units.scale          # the L1 cost is homogeneous in the scale
        row = {"index": k, "path": item.path.name, "label": item.label, "w_upper": w_u}
        gen_orig = norm.invert(gen) if norm else gen
        if dim == 2:
            fit = fit_circle(gen_orig)
            row.update(center_x=fit.center[0], center_y=fit.center[1], radius=fit.radius,
                       residual=fit.residual, quadrant=pdata.quadrant(fit.center))
            if "center" in item.extra:
                row.update(true_center_x=item.extra["center"][0], true_center_y=item.extra["center"][1],
                           true_radius=item.extra["radius"], true_quadrant=pdata.quadrant(item.extra["center"]))
        elif "mesh" in item.extra:
            mesh = pdata.load_mesh(item.extra["mesh"])
            mnorm = pdata.Normalization.from_json(item.extra["normalization"]) if "normalization" in item.extra else None
            verts = mnorm.apply(mesh.vertices) if mnorm else mesh.vertices
            verts = pdata.rotate_xy(verts, item.extra.get("angle", 0.0))
            mesh = type(mesh)(verts, mesh.faces)
            row.update(d2f=d2f(gen_orig, mesh), coverage=coverage(gen_orig, mesh, cov_threshold))
        rows.append(row)

    summary = EvalSummary(rows, median_w_upper=float(np.median([r["w_upper"] for r in rows])))
    if dim == 2:
        radii = np.array([r["radius"] for r in rows])
        summary.ks_radius = ks_statistic(radii, uniform_cdf(*CIRCLE_RADIUS_RANGE))
        quads = np.array([r["quadrant"] for r in rows])
        summary.quadrant_fractions = [float(np.mean(quads == q)) for q in range(4)]
        if rows and "true_quadrant" in rows[0]:
            summary.quadrant_hits = int(sum(r["quadrant"] == r["true_quadrant"] for r in rows))
    elif rows and "d2f" in rows[0]:
        summary.mean_d2f = float(np.mean([r["d2f"] for r in rows]))
        summary.mean_coverage = float(np.mean([r["coverage"] for r in rows]))
    if out_csv:
        write_rows(out_csv, rows)
    return summary


def write_rows(path, rows: list[dict]) -> None:
    fields = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
