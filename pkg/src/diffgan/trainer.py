"""Adversarial training loop with an adaptive forward-diffusion chain.

Each iteration runs, in order: a discriminator update on diffused real and
generated samples, a generator update through the differentiable diffusion
path, and (every 4th iteration, diffusion enabled) the chain-length update.

All randomness of iteration ``i`` comes from streams keyed by ``(seed, i)``,
so a run resumed from a checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffgan import diffusion as dfn
from diffgan import losses
from diffgan import metrics
from diffgan import tensor as T
from diffgan.config import Config
from diffgan.data import ImageDataset
from diffgan.errors import CheckpointError, ConfigError, DimensionError, NumericError
from diffgan.nets import Discriminator, Generator, NetConfig, ema_decay, ema_update

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["iter", "d_loss", "g_loss", "r_d", "T", "seconds"]
METRIC_COLUMNS = ["fid", "kid", "precision", "recall"]
DTYPE = np.float32


class TrainingAborted(NumericError):
    """Non-finite loss or gradient; ``snapshot`` points at the last good state."""

    def __init__(self, msg: str, snapshot: Path | None = None):
        super().__init__(msg)
        self.snapshot = snapshot


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.value) for k, p in params.items()},
                   {k: np.zeros_like(p.value) for k, p in params.items()})


def adam_update(params: dict, grads: dict, state: AdamState, lrate: float,
                b1: float = 0.0, b2: float = 0.99, eps: float = 1e-8) -> None:
    """One bias-corrected Adam step, in place on ``params[k].value``."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise DimensionError("adam_update: parameter, gradient and state names differ")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.value.shape:
            raise DimensionError(f"adam_update: {k} has gradient {g.shape} for {p.value.shape}")
        dt = p.value.dtype.type
        m = state.m[k] = dt(b1) * state.m[k] + dt(1 - b1) * g
        v = state.v[k] = dt(b2) * state.v[k] + dt(1 - b2) * (g * g)
        step = dt(lrate) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        p.value = p.value - step


# ---------------------------------------------------------------- state

def net_config(cfg: Config, channels: int, resolution: int) -> NetConfig:
    n = cfg.net
    arch = n.arch if n.arch != "auto" else ("mlp" if resolution == 1 else "conv")
    return NetConfig(arch=arch, channels=channels, resolution=resolution, z_dim=n.z_dim,
                     w_dim=n.w_dim, map_depth=n.map_depth, fmaps=n.fmaps, ch_base=n.ch_base,
                     ch_max=n.ch_max, n_blocks=n.n_blocks, mbstd_group=n.mbstd_group,
                     t_embed=n.t_embed, t_max=cfg.diffusion.t_max, hidden=n.hidden,
                     mlp_layers=n.mlp_layers)


class TrainState:
    """Everything a training run owns: networks, optimizers, diffusion state."""

    def __init__(self, cfg: Config, channels: int, resolution: int):
        self.cfg = cfg
        self.channels, self.resolution = channels, resolution
        self.net_cfg = net_config(cfg, channels, resolution)
        root = T.Rng(cfg.train.seed, T.stream_id("init"))
        self.G = Generator(self.net_cfg, root.child("G"), DTYPE)
        self.D = Discriminator(self.net_cfg, root.child("D"), DTYPE, mbstd=cfg.net.mbstd)
        self.G_ema = self.G.copy()
        self.adam_G = AdamState.zeros_like(self.G.params)
        self.adam_D = AdamState.zeros_like(self.D.params)
        d = cfg.diffusion
        self.schedule = dfn.make_schedule(d.t_max, d.beta_min, d.beta_max, d.sigma)
        self.diff = dfn.DiffusionState(t_current=d.t_min, t_min=d.t_min, t_max=d.t_max,
                                       d_target=d.d_target, c_step=d.c_step, p_pi=d.p_pi)
        if d.enabled:
            dfn.sample_tepl(self.diff, root.child("tepl"))
        self.iter = 0
        self.ema_decay = ema_decay(cfg.train.batch, cfg.train.ema_halflife_kimg)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, params in (("G", self.G.params), ("D", self.D.params),
                               ("G_ema", self.G_ema.params)):
            out += [(f"{prefix}/{k}", p.value) for k, p in params.items()]
        for prefix, st in (("adam_G", self.adam_G), ("adam_D", self.adam_D)):
            out += [(f"{prefix}.m/{k}", v) for k, v in st.m.items()]
            out += [(f"{prefix}.v/{k}", v) for k, v in st.v.items()]
        return out

    def assign(self, name: str, value: np.ndarray) -> None:
        prefix, key = name.split("/", 1)
        if prefix in ("G", "D", "G_ema"):
            net = {"G": self.G, "D": self.D, "G_ema": self.G_ema}[prefix]
            net.params[key].value = value
        else:
            opt, which = prefix.split(".")
            getattr(self, opt).__dict__[which][key] = value


def check_dataset(cfg: Config, ds: ImageDataset) -> None:
    """Fail before training when the dataset cannot feed the configured nets."""
    if len(ds) < 2:
        raise ConfigError("dataset needs at least 2 samples")
    arch = cfg.net.arch
    if ds.kind == "points" and arch == "conv":
        raise ConfigError("net.arch=conv cannot train on a point dataset")
    if ds.kind == "images" and ds.resolution == 1 and arch == "conv":
        raise ConfigError("net.arch=conv needs images larger than 1x1")
    if ds.kind == "images" and arch != "mlp":
        try:
            net_config(cfg, ds.channels, ds.resolution).base_resolution()
        except ConfigError as exc:
            raise ConfigError(f"dataset resolution {ds.resolution}: {exc}") from None


# ---------------------------------------------------------------- one iteration

def _losses(cfg: Config):
    if cfg.loss.kind == "wasserstein":
        return losses.d_loss_w, losses.g_loss_w
    return losses.d_loss_ns, (losses.g_loss_saturating if cfg.loss.saturating else losses.g_loss_ns)


def _finite(x: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(x)))


def step_three_fires(cfg: Config, i: int) -> bool:
    return cfg.diffusion.enabled and i % 4 == 0


def train_step(state: TrainState, data: np.ndarray) -> dict:
    """Run one full iteration and return its log row."""
    cfg, i = state.cfg, state.iter
    m = cfg.train.batch
    rng = T.Rng(cfg.train.seed, T.stream_id("iter", i))
    d_loss_fn, g_loss_fn = _losses(cfg)
    enabled = cfg.diffusion.enabled
    zshape = (m, state.net_cfg.z_dim)

    def draw(tag: str) -> np.ndarray:
        if not enabled:
            return np.zeros(m, dtype=np.int64)
        return dfn.draw_t(state.diff, rng.child(tag), m)

    # Step I: discriminator
    with T.no_grad():
        z = T.constant(T.randn(rng.child("z_d"), zshape, DTYPE))
        x_fake = state.G(z, rng.child("noise_d")).value
    x_real = data[rng.child("batch").integers(0, len(data), m)]
    t = draw("t_d")
    y_real = dfn.q_sample(T.constant(x_real), t, state.schedule, rng.child("q_real"))
    y_fake = dfn.q_sample(T.constant(x_fake), t, state.schedule, rng.child("q_fake"))
    real_logits = state.D(y_real, t)
    fake_logits = state.D(y_fake, t)
    d_loss = d_loss_fn(real_logits, fake_logits)
    total = d_loss
    lc = cfg.loss
    # the Wasserstein critic runs unregularized unless gp is requested
    if lc.kind == "ns" and lc.gamma > 0 and i % lc.r1_interval == 0:
        r1 = losses.r1_penalty_zo(state.D, y_real.value, t, lc.gamma * lc.r1_interval,
                                  lc.n_probes, lc.probe_eps, rng.child("r1"))
        total = T.add(total, r1)
    if lc.gp_lambda > 0:
        gp = losses.gp_penalty_zo(state.D, y_real.value, y_fake.value, t, lc.gp_lambda,
                                  lc.n_probes, lc.probe_eps, rng.child("gp"))
        total = T.add(total, gp)
    if not _finite(total.value):
        raise NumericError(f"iteration {i}: non-finite discriminator loss {float(total.value)}")
    state.D.params.zero_grad()
    T.backward(total)
    _step(state.D.params, state.adam_D, cfg, "discriminator", i)

    # Step II: generator
    z = T.constant(T.randn(rng.child("z_g"), zshape, DTYPE))
    x_gen = state.G(z, rng.child("noise_g"))
    t_g = draw("t_g")
    y_gen = dfn.q_sample(x_gen, t_g, state.schedule, rng.child("q_gen"))
    with state.D.params.frozen():
        g_loss = g_loss_fn(state.D(y_gen, t_g))
    if not _finite(g_loss.value):
        raise NumericError(f"iteration {i}: non-finite generator loss {float(g_loss.value)}")
    state.G.params.zero_grad()
    T.backward(g_loss)
    _step(state.G.params, state.adam_G, cfg, "generator", i)
    ema_update(state.G_ema.params, state.G.params, state.ema_decay)

    # diffusion update: chain length
    r_d = None
    if step_three_fires(cfg, i):
        r_d = dfn.compute_rd(real_logits.value)
        dfn.update_T(state.diff, r_d)
        dfn.sample_tepl(state.diff, rng.child("tepl"))

    state.iter += 1
    return {"iter": i, "d_loss": float(d_loss.value), "g_loss": float(g_loss.value),
            "r_d": r_d, "T": state.diff.t_current if enabled else 0}


def _step(params: dict, opt: AdamState, cfg: Config, who: str, i: int) -> None:
    grads = {k: p.grad for k, p in params.items()}
    for k, g in grads.items():
        if not _finite(g):
            raise NumericError(f"iteration {i}: non-finite {who} gradient in {k}")
    tc = cfg.train
    adam_update(params, grads, opt, tc.lrate, tc.adam_b1, tc.adam_b2, tc.adam_eps)


# ---------------------------------------------------------------- sampling / eval

def generate(G: Generator, n: int, seed: int, batch: int = 256) -> np.ndarray:
    """Draw ``n`` samples from ``G`` with streams keyed by ``seed``."""
    out = []
    root = T.Rng(seed, T.stream_id("generate"))
    with T.no_grad():
        for b, start in enumerate(range(0, n, batch)):
            r = root.child("batch", b)
            m = min(batch, n - start)
            z = T.constant(T.randn(r.child("z"), (m, G.cfg.z_dim), G.dtype))
            out.append(G(z, r.child("noise")).value)
    return np.concatenate(out, axis=0)


def make_extractor(cfg: Config, ds: ImageDataset) -> metrics.FeatureExtractor:
    kind = cfg.eval.extractor
    if kind == "auto":
        kind = "raw_pixels" if ds.kind == "points" or ds.resolution == 1 else "random_conv"
    return metrics.FeatureExtractor(kind, cfg.eval.extractor_seed, cfg.eval.extractor_width)


def evaluate_generator(G: Generator, ds: ImageDataset, cfg: Config, seed: int,
                       n_samples: int | None = None) -> dict:
    """Metric JSON document for ``G`` against ``ds``."""
    n = n_samples or min(len(ds), cfg.eval.n_samples)
    fake = generate(G, n, seed)
    real = ds.images[:n] if n <= len(ds) else ds.images
    ext = make_extractor(cfg, ds)
    doc = metrics.evaluate(real, fake, ext, cfg.eval.k, cfg.eval.kid_block)
    doc["seed"] = int(seed)
    if ds.kind == "points" and "centers" in ds.meta:
        radius = cfg.eval.hq_radius or 3.0 * float(ds.meta.get("std", 0.05))
        modes, hq = metrics.mode_coverage(fake.reshape(len(fake), -1),
                                          np.asarray(ds.meta["centers"]), radius)
        doc["modes"], doc["hq_fraction"] = modes, hq
    return doc


# ---------------------------------------------------------------- checkpoints

def _ckpt_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``<path>.bin`` (little-endian float32 arrays) and ``<path>.json``."""
    blob_path, manifest_path = _ckpt_paths(path)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in state.tensors():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "iter": state.iter,
        "channels": state.channels,
        "resolution": state.resolution,
        "adam_steps": {"G": state.adam_G.step, "D": state.adam_D.step},
        "diffusion": {"t_current": state.diff.t_current, "tepl": list(state.diff.tepl)},
        "config": state.cfg.to_dict(),
        "tensors": entries,
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path) -> TrainState:
    """Rebuild a :class:`TrainState`; corrupt or mismatched files raise CheckpointError."""
    blob_path, manifest_path = _ckpt_paths(path)
    if not manifest_path.is_file() or not blob_path.is_file():
        raise CheckpointError(f"checkpoint not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path}: manifest is not valid JSON ({exc})") from None
    for key in ("format_version", "iter", "config", "tensors", "diffusion", "adam_steps"):
        if key not in doc:
            raise CheckpointError(f"{manifest_path}: missing field {key!r}")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"format_version {doc['format_version']} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        cfg = Config.from_dict(doc["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{manifest_path}: config echo invalid: {exc}") from None
    state = TrainState(cfg, doc["channels"], doc["resolution"])
    expected = {name: arr.shape for name, arr in state.tensors()}
    blob = blob_path.read_bytes()
    seen = set()
    for e in doc["tensors"]:
        name, shape = e["name"], tuple(e["shape"])
        if name not in expected:
            raise CheckpointError(f"tensor {name!r}: not part of this model")
        if shape != expected[name]:
            raise CheckpointError(f"tensor {name!r}: shape {shape} != model shape {expected[name]}")
        if e["nbytes"] != 4 * int(np.prod(shape)):
            raise CheckpointError(f"tensor {name!r}: nbytes {e['nbytes']} disagrees with shape")
        if e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(
                f"tensor {name!r}: blob truncated ({len(blob)} bytes, need {e['offset'] + e['nbytes']})")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=e["offset"])
        state.assign(name, arr.reshape(shape).astype(DTYPE))
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"tensor {sorted(missing)[0]!r}: missing from manifest")
    end = max((e["offset"] + e["nbytes"] for e in doc["tensors"]), default=0)
    if end != len(blob):
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest covers {end}")
    state.iter = int(doc["iter"])
    state.adam_G.step = int(doc["adam_steps"]["G"])
    state.adam_D.step = int(doc["adam_steps"]["D"])
    state.diff.t_current = int(doc["diffusion"]["t_current"])
    state.diff.tepl = [int(v) for v in doc["diffusion"]["tepl"]]
    return state


# ---------------------------------------------------------------- outer loop

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(cfg: Config, ds: ImageDataset, out_dir, resume=None, stop_at: int | None = None,
          on_row=None, on_snapshot=None) -> TrainState:
    """Train for ``cfg.train.total_iters`` iterations, writing artifacts to ``out_dir``.

    Artifacts: ``log.csv`` (one row per iteration), ``metrics-<iter>.json`` on
    eval iterations, ``snapshot-<iter>`` checkpoints and ``final`` checkpoint.
    ``stop_at`` ends the run early (still writing ``final``); ``resume`` names a
    checkpoint to continue from. ``on_snapshot(state, tag)`` runs after each
    snapshot and after the final checkpoint.
    """
    cfg.validate()
    check_dataset(cfg, ds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume)
        if state.cfg.to_dict() != cfg.to_dict():
            raise ConfigError("resume: checkpoint config differs from the requested config")
    else:
        state = TrainState(cfg, ds.channels, ds.resolution)
    if (state.channels, state.resolution) != (ds.channels, ds.resolution):
        raise ConfigError(
            f"dataset is {ds.channels}x{ds.resolution}, model expects {state.channels}x{state.resolution}")
    data = np.ascontiguousarray(ds.images, dtype=DTYPE)
    tc = cfg.train
    end = tc.total_iters if stop_at is None else min(stop_at, tc.total_iters)
    cols = LOG_COLUMNS + (METRIC_COLUMNS if tc.eval_interval else [])
    log_path = out / "log.csv"
    kept = _read_rows(log_path, state.iter) if resume is not None else []
    t0 = time.perf_counter()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in kept:
            writer.writerow(row)
        while state.iter < end:
            try:
                row = train_step(state, data)
            except NumericError as exc:
                snap = save_checkpoint(state, out / "abort")
                raise TrainingAborted(f"{exc}; last good state saved to {snap}", snap) from None
            i = row["iter"]
            row["seconds"] = round(time.perf_counter() - t0, 3) if tc.wallclock else None
            if tc.eval_interval and (i + 1) % tc.eval_interval == 0:
                doc = evaluate_generator(state.G_ema, ds, cfg, seed=tc.seed)
                doc["iter"] = i
                (out / f"metrics-{i + 1:06d}.json").write_text(
                    json.dumps(doc, indent=1, sort_keys=True) + "\n")
                row.update({k: doc[k] for k in METRIC_COLUMNS})
            writer.writerow([_fmt(row.get(c)) for c in cols])
            if on_row is not None:
                on_row(row)
            if tc.snapshot_interval and (i + 1) % tc.snapshot_interval == 0 and i + 1 < end:
                save_checkpoint(state, out / f"snapshot-{i + 1:06d}")
                if on_snapshot is not None:
                    on_snapshot(state, f"{i + 1:06d}")
    save_checkpoint(state, out / "final")
    if on_snapshot is not None:
        on_snapshot(state, "final")
    return state


def _read_rows(path: Path, before: int) -> list[list[str]]:
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if r and int(r[0]) < before]
