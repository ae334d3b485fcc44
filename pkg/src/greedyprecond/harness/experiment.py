"""End-to-end deblurring experiments: data, training, evaluation, artifacts."""

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import asdict, dataclass, field, fields
import io
import json
import logging
from pathlib import Path
import platform
import shutil
import tempfile

import numpy as np

from .. import __version__
from ..deploy import (
    DeployPolicy,
    SCHEDULE_VERSION,
    backtracking_gd,
    bfgs,
    fista,
    gd_fixed,
    reference_optima,
    run_schedule,
    save_schedule,
)
from ..exceptions import InvalidInputError, ParseError
from ..objectives import GaussianBlur, HuberTV
from ..preconditioners import TAGS, from_tag
from ..trainer import TrainerConfig, train
from .data import DatasetSpec, load_dir, make_split, synthesize_observation

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "Prepared",
    "prepare",
    "train_schedules",
    "evaluate",
    "run_experiment",
    "write_trace_csv",
    "compare",
    "parse_config_text",
    "load_config_file",
    "resize",
    "write_pgm",
    "BASELINES",
    "CSV_COLUMNS",
    "DIVERGED",
]

CSV_COLUMNS = ("method", "t", "mean_gap", "median_gap", "mean_grad_norm")
DIVERGED = "diverged"
SPLITS = ("train", "test_ones", "test_others")
BASELINES = ("gd_fixed", "backtracking", "fista", "bfgs")
DUMP_ITERATIONS = (10, 20, 50, 90)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``kernel_shape`` of ``None`` means a kernel as large as the image.
    ``image_size`` below 28 resizes the digits by area averaging.
    ``x0`` is ``"observation"`` (start at ``y``) or ``"zero"``.
    """

    sigma: float = 2.0
    noise_level: float = 0.04
    alpha: float = 1e-4
    eps: float = 0.01
    parametrizations: tuple = ("conv",)
    kernel_shape: tuple = None
    T: int = 100
    inner_cap: int = 5000
    nu: float = 1e-3
    inner_solver: str = "plain"
    init: str = "safeguard"
    safeguard: bool = True
    tau_policy: str = "smooth"
    policy: str = "freeze"
    iters: int = 100
    baselines: tuple = BASELINES
    train_ones: int = 1000
    test_ones: int = 100
    test_others: int = 100
    image_size: int = 28
    x0: str = "observation"
    data_dir: str = None
    out_dir: str = "artifacts"
    seed: int = 0
    workers: int = 1
    ref_tol: float = 1e-10
    ref_max_iter: int = 50_000
    dump_iterations: tuple = DUMP_ITERATIONS

    def __post_init__(self):
        self.parametrizations = tuple(self.parametrizations)
        self.baselines = tuple(self.baselines)
        self.dump_iterations = tuple(int(t) for t in self.dump_iterations)
        if self.kernel_shape is not None:
            self.kernel_shape = tuple(int(h) for h in self.kernel_shape)
        for tag in self.parametrizations:
            if tag not in TAGS:
                raise InvalidInputError(f"unknown parametrisation {tag!r}")
        for name in self.baselines:
            if name not in BASELINES:
                raise InvalidInputError(f"unknown baseline {name!r}; choose from {BASELINES}")
        if self.x0 not in ("observation", "zero"):
            raise InvalidInputError("x0 must be 'observation' or 'zero'")
        if not 1 <= self.image_size <= 28:
            raise InvalidInputError("image_size must be between 1 and 28")
        DeployPolicy(self.policy)
        self.trainer_config()

    def trainer_config(self):
        return TrainerConfig(
            T=self.T,
            inner_cap=self.inner_cap,
            nu=self.nu,
            inner_solver=self.inner_solver,
            init=self.init,
            safeguard=self.safeguard,
            tau_policy=self.tau_policy,
        )

    def dataset_spec(self):
        return DatasetSpec(self.data_dir, self.train_ones, self.test_ones, self.test_others, self.seed)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# plain-text configuration


def _coerce(name, text):
    ftype = {f.name: f.type for f in fields(ExperimentConfig)}.get(name)
    if ftype is None:
        raise ParseError(f"unknown configuration key {name!r}")
    default = ExperimentConfig.__dataclass_fields__[name].default
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    if ftype is bool or isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ParseError(f"{name}: expected a boolean, got {text!r}")
    if ftype is tuple or ftype == "tuple":
        parts = [p.strip() for p in text.replace("x", ",").split(",")] if name == "kernel_shape" \
            else [p.strip() for p in text.split(",")]
        parts = [p for p in parts if p]
        if name in ("kernel_shape", "dump_iterations"):
            try:
                return tuple(int(p) for p in parts)
            except ValueError as exc:
                raise ParseError(f"{name}: expected integers, got {text!r}") from exc
        return tuple(parts)
    try:
        if ftype is int or isinstance(default, int):
            return int(text)
        if ftype is float or isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ParseError(f"{name}: cannot parse {text!r}") from exc
    return text


def parse_config_text(text):
    """``key = value`` lines, ``#`` comments; returns a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config_file(path):
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# images


def _area_matrix(m, s):
    """``s x m`` matrix averaging ``m`` pixels into ``s`` equal-width bins."""
    R = np.zeros((s, m))
    w = m / s
    for i in range(s):
        lo, hi = i * w, (i + 1) * w
        for j in range(int(np.floor(lo)), min(m, int(np.ceil(hi)))):
            R[i, j] = (min(hi, j + 1) - max(lo, j)) / w
    return R


def resize(images, size):
    """Area-average ``(..., m, m)`` images down to ``size x size``."""
    images = np.asarray(images, dtype=np.float64)
    m = images.shape[-1]
    if size == m:
        return images
    R = _area_matrix(m, size)
    return R @ images @ R.T


def write_pgm(path, image):
    """8-bit binary graymap; the image is rescaled so its range maps onto ``[0, 255]``."""
    x = np.asarray(image, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    scaled = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{x.shape[1]} {x.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Prepared:
    """Objectives, starting points and bookkeeping for every split."""

    config: ExperimentConfig
    blur: GaussianBlur
    indices: dict
    truth: dict
    objectives: dict
    x0: dict
    noise: dict
    refs: dict = field(default_factory=dict)


def _pmap(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def prepare(config, splits=SPLITS):
    """Load data, split it, synthesise observations and build the objectives."""
    images, labels = load_dir(config.data_dir)
    split = make_split(labels, config.dataset_spec())
    chosen = {"train": split.train_ones, "test_ones": split.test_ones, "test_others": split.test_others}
    size = config.image_size
    blur = GaussianBlur(config.sigma, (size, size))
    prep = Prepared(config, blur, {}, {}, {}, {}, {})
    for name in splits:
        idx = chosen[name]
        truth = resize(images[idx], size)

        def build(i):
            y, ratio = synthesize_observation(truth[i], blur, config.noise_level, config.seed, int(idx[i]))
            f = HuberTV(blur, y, config.alpha, config.eps)
            x0 = y.copy() if config.x0 == "observation" else np.zeros_like(y)
            return f, x0, ratio

        built = _pmap(build, range(len(idx)), config.workers)
        prep.indices[name] = idx
        prep.truth[name] = truth
        prep.objectives[name] = [b[0] for b in built]
        prep.x0[name] = np.stack([b[1] for b in built])
        prep.noise[name] = np.array([b[2] for b in built])
    return prep


def compute_references(prep, splits=None):
    """High-accuracy minimisers for the requested splits, cached on ``prep``."""
    cfg = prep.config
    for name in splits or list(prep.objectives):
        if name in prep.refs:
            continue
        X, fstar, info = reference_optima(prep.objectives[name], prep.x0[name], cfg.ref_tol, cfg.ref_max_iter)
        if not np.all(info["converged"]):
            logger.warning("%s: %d reference solves stopped above tolerance (worst %.2e)",
                           name, int(np.sum(~info["converged"])), float(np.max(info["grad_norm"])))
        prep.refs[name] = (X, fstar, info)
    return prep.refs


def _param_for(tag, cfg):
    shape = (cfg.image_size, cfg.image_size)
    return from_tag(tag, shape, cfg.kernel_shape if tag == "conv" else None)


def train_schedules(prep):
    """Train one schedule per configured parametrisation on the training split."""
    cfg = prep.config
    dataset = list(zip(prep.objectives["train"], prep.x0["train"]))
    provenance = {
        "seed": cfg.seed,
        "train_indices_sha": _digest(prep.indices["train"]),
        "train_size": len(dataset),
        "version": __version__,
    }
    out = {}
    for tag in cfg.parametrizations:
        param = _param_for(tag, cfg)
        logger.info("training %s", param)
        out[tag] = train(dataset, param, cfg.trainer_config(), provenance=dict(provenance))
    return out


def _digest(arr):
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.int64).tobytes()).hexdigest()[:16]


def _baseline(name, f, x0, iters, f_star, record_at):
    if name == "gd_fixed":
        return gd_fixed(f, x0, 1.0 / f.L, iters, f_star=f_star, record_at=record_at)
    if name == "backtracking":
        return backtracking_gd(f, x0, iters, f_star=f_star, record_at=record_at)
    if name == "fista":
        return fista(f, x0, iters, f_star=f_star, record_at=record_at)
    if name == "bfgs":
        return bfgs(f, x0, iters, f_star=f_star, record_at=record_at)
    raise InvalidInputError(f"unknown baseline {name!r}")


def evaluate(prep, split, schedules=None, baselines=None, record_first=True):
    """Run learned schedules and baselines on every objective of ``split``.

    Returns a dict ``method -> list of RunTrace`` in dataset order.
    """
    cfg = prep.config
    _, fstar, _ = compute_references(prep, [split])[split]
    objs, X0 = prep.objectives[split], prep.x0[split]
    policy = DeployPolicy(cfg.policy)
    methods = {}
    for tag, sched in (schedules or {}).items():
        label = f"learned-{tag}-{policy.value}"
        methods[label] = lambda f, x0, fs, rec, s=sched, lab=label: run_schedule(
            f, x0, s, policy, cfg.iters, f_star=fs, record_at=rec, label=lab)
    for name in cfg.baselines if baselines is None else baselines:
        methods[name] = lambda f, x0, fs, rec, n=name: _baseline(n, f, x0, cfg.iters, fs, rec)
    out = {}
    for label, run in methods.items():
        def one(k):
            rec = cfg.dump_iterations if (record_first and k == 0) else ()
            return run(objs[k], X0[k], float(fstar[k]), rec)
        out[label] = _pmap(one, range(len(objs)), cfg.workers)
    return out


def _fmt(v):
    return repr(float(v))


def trace_rows(method, runs, iters):
    """Aggregate runs into CSV rows; steps after any divergence are marked."""
    rows = []
    for t in range(iters + 1):
        alive = [r for r in runs if len(r.f) > t]
        if len(alive) < len(runs):
            if not any(r.diverged for r in runs):
                break
            rows.append([method, str(t), DIVERGED, DIVERGED, DIVERGED])
            continue
        gaps = np.array([r.gap[t] for r in alive])
        gn = np.array([r.grad_norm[t] for r in alive])
        rows.append([method, str(t), _fmt(np.mean(gaps)), _fmt(np.median(gaps)), _fmt(np.mean(gn))])
    return rows


def write_trace_csv(path, results, iters):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for method in results:
        w.writerows(trace_rows(method, results[method], iters))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _dump_images(out, split, prep, results):
    d = out / "reconstructions" / split
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "truth.pgm", prep.truth[split][0])
    write_pgm(d / "observation.pgm", prep.objectives[split][0].y)
    for method, runs in results.items():
        for t, x in sorted(runs[0].snapshots.items()):
            write_pgm(d / f"{method}_t{t:03d}.pgm", x)


def _stats(a):
    a = np.asarray(a, dtype=np.float64)
    return {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max())}


def _prepare_out_dir(out):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (out / "manifest.json").exists():
        raise InvalidInputError(f"{out} exists, is not empty and holds no previous experiment")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out, Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))


def _commit(tmp, out):
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def run_experiment(config, prep=None):
    """Train, evaluate on every split and write all artifacts to ``config.out_dir``.

    Artifacts are assembled in a temporary sibling directory and moved into
    place only when everything succeeded.
    """
    out, tmp = _prepare_out_dir(config.out_dir)
    try:
        prep = prepare(config) if prep is None else prep
        compute_references(prep)
        trained = train_schedules(prep)
        schedules = {tag: s for tag, (s, _) in trained.items()}
        for tag, (sched, trace) in trained.items():
            save_schedule(sched, tmp / f"schedule_{tag}.gps")
        for split in SPLITS:
            results = evaluate(prep, split, schedules, record_first=(split != "train"))
            write_trace_csv(tmp / f"trace_{split}.csv", results, config.iters)
            if split != "train":
                _dump_images(tmp, split, prep, results)
        _write_manifest(tmp, prep, trained)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, out)
    return out


def _write_manifest(out, prep, trained=None, extra=None):
    cfg = prep.config
    manifest = {
        "config": cfg.to_dict(),
        "seeds": {"split": cfg.seed, "noise": f"default_rng([{cfg.seed}, image index])"},
        "indices": {k: [int(i) for i in v] for k, v in prep.indices.items()},
        "noise": {k: _stats(v) for k, v in prep.noise.items()},
        "reference": {
            k: {"max_grad_norm": float(np.max(info["grad_norm"])),
                "converged": int(np.sum(info["converged"])),
                "iterations": int(info["iterations"])}
            for k, (_, _, info) in prep.refs.items()
        },
        "reconstructions": "8-bit binary PGM (P5), per-image affine rescale of [min, max] to [0, 255]",
        "schedule_format_version": SCHEDULE_VERSION,
        "library_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }
    if trained:
        manifest["training"] = {
            tag: {"F_final": tr.F[-1], "fallbacks": int(sum(tr.fallback)),
                  "inner_iterations": int(sum(tr.inner_iters))}
            for tag, (_, tr) in trained.items()
        }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_trace_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ParseError(f"{path}: expected columns {','.join(CSV_COLUMNS)}, found {header}")
        return list(reader)


def compare(paths, out_path=None, experiment_names=None):
    """Merge trace CSVs into long format keyed by ``(experiment, method, t)``.

    Each path is either a CSV file or an artifact directory, in which case
    all of its ``trace_*.csv`` files are merged under ``<dir>/<split>``.

    Raises
    ------
    ParseError
        On a header mismatch or when a key appears twice with different values.
    """
    sources = []
    for i, p in enumerate(paths):
        p = Path(p)
        base = experiment_names[i] if experiment_names else p.name
        if p.is_dir():
            for csv_path in sorted(p.glob("trace_*.csv")):
                sources.append((f"{base}/{csv_path.stem[len('trace_'):]}", csv_path))
        else:
            sources.append((p.stem if not experiment_names else base, p))
    merged = {}
    conflicts = []
    for exp, path in sources:
        for row in read_trace_csv(path):
            key = (exp, row[0], int(row[1]))
            if key in merged and merged[key] != row[2:]:
                conflicts.append(key)
            merged.setdefault(key, row[2:])
    if conflicts:
        listing = ", ".join(f"{e}:{m}:t={t}" for e, m, t in conflicts[:20])
        raise ParseError(f"{len(conflicts)} conflicting rows: {listing}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("experiment",) + CSV_COLUMNS)
    for (exp, method, t) in sorted(merged):
        w.writerow([exp, method, t] + merged[(exp, method, t)])
    text = buf.getvalue()
    if out_path is not None:
        Path(out_path).write_text(text, encoding="utf-8")
    return text
