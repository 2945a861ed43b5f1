"""Command-line front end: ``aelab {train,eval,derotate,shape,export}``.

Experiments are described by an INI file (see README for the grammar). Every
command writes its artifacts plus a ``manifest.json`` into the output
directory. Exit status: 0 success, 1 usage or configuration error, 2 runtime
failure.
"""

import argparse
import configparser
import hashlib
import io
import json
import os
import platform
import sys
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .autoencoders import (
    SCENARIOS,
    ScenarioConfig,
    TrainedSystem,
    constellation_to_real,
    derotate,
    real_to_points,
    slot_leakage,
    system_link,
    train,
    transmit_codebook,
)
from .baselines import (
    alamouti_link,
    allocation_formats,
    broadcast_link,
    svd_link,
    time_share_system,
)
from .constellations import (
    Constellation,
    lattice_d4,
    save_constellation,
    shaped_constellation,
    square_qam,
    train_gs_awgn,
)
from .evaluation import StopRule, sweep
from .numerics import RngStream

OUT_ENV = "AELAB_OUT"
CACHE_ENV = "AELAB_CACHE"
MODEL_FILE = "model.aemodel"

BASELINES = {
    "open_loop": ("alamouti_qam", "alamouti_gs2", "alamouti_gs4"),
    "closed_loop": ("svd_qpsk_equal", "svd_alloc"),
    "broadcast": ("zf_qpsk", "vp_qpsk"),
    "interference": ("ts_qam16", "ts_gs256", "ts_w4_256"),
    "awgn_gs": (),
}

DEFAULT_EVAL_DB = {
    "open_loop": tuple(range(0, 31, 2)),
    "closed_loop": tuple(range(0, 31, 2)),
    "broadcast": tuple(range(5, 21, 3)),
    "interference": tuple(range(6, 15)),
    "awgn_gs": tuple(range(0, 21, 2)),
}

# streams of the master seed, one per activity
TRAIN_STREAM, EVAL_STREAM, SHAPE_STREAM, ROTATE_STREAM = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid configuration or command-line usage (exit status 1)."""


class RunError(RuntimeError):
    """Runtime failure such as a missing artifact (exit status 2)."""


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig
    scale: str = "desk"
    eval_snr_db: tuple = ()
    stop: StopRule = field(default_factory=StopRule)
    baselines: tuple = ()
    include_ae: bool = True
    sigma: tuple = ()
    vp_xi: float = 0.6
    vp_range: int = 5
    out: str = ""
    model: str = ""
    cache: str = ""
    workers: int = 1
    plot: bool = True
    derotate_steps: int = 20000
    derotate_lr: float = 1e-3
    derotate_starts: int = 4
    shape_name: str = "c2_16"
    shape_steps: int = 0
    shape_batch: int = 0

    def __post_init__(self):
        allowed = BASELINES[self.scenario.scenario]
        for tag in self.baselines:
            if tag not in allowed:
                raise ConfigError(f"baseline {tag!r} is not valid for scenario {self.scenario.scenario!r}")
        if self.sigma and self.scenario.scenario != "closed_loop":
            raise ConfigError("fixed singular values apply to the closed-loop scenario only")
        if self.scenario.scenario == "open_loop" and self.scenario.m != 16:
            for tag in ("alamouti_gs2", "alamouti_gs4"):
                if tag in self.baselines:
                    raise ConfigError(f"baseline {tag!r} needs m = 16")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.scale not in ("desk", "paper"):
            raise ConfigError(f"scale must be desk or paper, not {self.scale!r}")

    def output_dir(self) -> Path:
        if self.out:
            return Path(self.out)
        return Path(os.environ.get(OUT_ENV, "runs")) / self.scenario.scenario

    def cache_dir(self) -> Path:
        if self.cache:
            return Path(self.cache)
        if os.environ.get(CACHE_ENV):
            return Path(os.environ[CACHE_ENV])
        return self.output_dir() / "cache"


# --- config grammar -----------------------------------------------------------------
#
# (section, key) -> (attribute path, kind). "sc." targets the ScenarioConfig.

_KEYS = {
    ("scenario", "scenario"): ("sc.scenario", "str"),
    ("scenario", "scale"): ("scale", "str"),
    ("scenario", "m"): ("sc.m", "int"),
    ("scenario", "nt"): ("sc.nt", "int"),
    ("scenario", "nr"): ("sc.nr", "int"),
    ("scenario", "nb"): ("sc.nb", "int"),
    ("scenario", "l"): ("sc.l", "int"),
    ("scenario", "pt"): ("sc.pt", "float"),
    ("scenario", "users"): ("sc.users", "int"),
    ("scenario", "seed"): ("sc.seed", "int"),
    ("network", "tx_hidden"): ("sc.tx_hidden", "ints"),
    ("network", "rx_hidden"): ("sc.rx_hidden", "ints"),
    ("train", "batch"): ("sc.batch", "int"),
    ("train", "steps"): ("sc.steps", "int"),
    ("train", "learning_rate"): ("sc.lr", "float"),
    ("train", "learning_rate_final"): ("sc.lr_final", "float"),
    ("train", "starts"): ("sc.starts", "int"),
    ("train", "probe_steps"): ("sc.probe_steps", "int"),
    ("train", "snr_db"): ("sc.snr_db", "floats"),
    ("train", "snr_kind"): ("sc.snr_kind", "str"),
    ("eval", "snr_db"): ("eval_snr_db", "floats"),
    ("eval", "min_errors"): ("stop.min_errors", "int"),
    ("eval", "max_trials"): ("stop.max_trials", "int"),
    ("eval", "shard_size"): ("stop.shard_size", "int"),
    ("eval", "baselines"): ("baselines", "strs"),
    ("eval", "include_ae"): ("include_ae", "bool"),
    ("eval", "sigma"): ("sigma", "floats"),
    ("eval", "vp_xi"): ("vp_xi", "float"),
    ("eval", "vp_range"): ("vp_range", "int"),
    ("run", "out"): ("out", "str"),
    ("run", "model"): ("model", "str"),
    ("run", "cache"): ("cache", "str"),
    ("run", "workers"): ("workers", "int"),
    ("run", "plot"): ("plot", "bool"),
    ("derotate", "steps"): ("derotate_steps", "int"),
    ("derotate", "learning_rate"): ("derotate_lr", "float"),
    ("derotate", "starts"): ("derotate_starts", "int"),
    ("shape", "name"): ("shape_name", "str"),
    ("shape", "steps"): ("shape_steps", "int"),
    ("shape", "batch"): ("shape_batch", "int"),
}


def _parse_value(text, kind, key):
    text = text.strip()
    try:
        if kind == "str":
            return text
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        items = [v.strip() for v in text.split(",") if v.strip()]
        if kind == "ints":
            return tuple(int(v) for v in items)
        if kind == "floats":
            return tuple(float(v) for v in items)
        return tuple(items)
    except ValueError:
        raise ConfigError(f"bad {kind} value {text!r} for key {key!r}") from None


def _format_value(value, kind):
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats", "strs"):
        return ", ".join(repr(v) if kind == "floats" else str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def _get(cfg, path):
    obj = cfg
    for part in path.split("."):
        obj = cfg.scenario if part == "sc" else getattr(obj, part)
    return obj


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {s for s, _ in _KEYS}
    values = {}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if (section, key) not in _KEYS:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            path, kind = _KEYS[(section, key)]
            values[path] = _parse_value(raw, kind, key)
    if "sc.scenario" not in values:
        raise ConfigError("missing required key 'scenario' in section [scenario]")
    name = values.pop("sc.scenario")
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}")
    scale = values.pop("scale", "desk")
    if scale not in ("desk", "paper"):
        raise ConfigError(f"scale must be desk or paper, not {scale!r}")
    base = ScenarioConfig.paper(name, values.get("sc.m")) if scale == "paper" \
        else ScenarioConfig.desk(name, values.get("sc.m"))
    sc_over = {p[3:]: v for p, v in values.items() if p.startswith("sc.")}
    stop_over = {p[5:]: v for p, v in values.items() if p.startswith("stop.")}
    top = {p: v for p, v in values.items() if "." not in p}
    try:
        scenario = replace(base, **sc_over)
        stop = StopRule(**stop_over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    top.setdefault("eval_snr_db", tuple(float(v) for v in DEFAULT_EVAL_DB[name]))
    return ExperimentConfig(scenario=scenario, scale=scale, stop=stop, **top)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text listing every key; parses back to an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    for (section, key), (path, kind) in _KEYS.items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, _format_value(_get(cfg, path), kind))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


# --- artifacts ----------------------------------------------------------------------

def _versions():
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"aelab": pkg, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, files):
    manifest = {
        "command": command,
        "seed": cfg.scenario.seed,
        "config_hash": config_hash(cfg),
        "config": serialize_config(cfg),
        "versions": _versions(),
        "files": sorted(str(f) for f in files),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_plot_script(out: Path, csvs, xlabel):
    lines = [
        "set logscale y",
        f"set xlabel '{xlabel}'",
        "set ylabel 'BLER'",
        "set grid",
        "set datafile separator ','",
        "plot " + ", \\\n     ".join(
            f"'{c.name}' using 1:2 skip 1 with linespoints title '{c.stem[5:]}'" for c in csvs),
    ]
    path = out / "plot.gp"
    path.write_text("\n".join(lines) + "\n")
    return path


def _model_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.model) if cfg.model else cfg.output_dir() / MODEL_FILE


def _load_model(cfg: ExperimentConfig) -> TrainedSystem:
    path = _model_path(cfg)
    if not path.is_file():
        raise RunError(f"model file {path} not found; run 'train' first or set [run] model")
    system = TrainedSystem.load(path)
    if system.config.scenario != cfg.scenario.scenario:
        raise ConfigError(f"model is a {system.config.scenario} system, config asks for {cfg.scenario.scenario}")
    return system


# --- commands -----------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig):
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.scenario
    rng = RngStream(sc.seed, TRAIN_STREAM)
    files = []
    if sc.scenario == "awgn_gs":
        omega = train_gs_awgn(sc.m, sc.nb, sc.snr_db[-1], rng, batch=sc.batch, steps=sc.steps,
                              lr=sc.lr, rx_hidden=sc.rx_hidden)
        path = out / f"gs_{sc.m}_{sc.nb}.txt"
        save_constellation(omega, path)
        files.append(path)
        trace = np.asarray(omega.info.get("loss_trace", []))
    else:
        system = train(sc, rng)
        path = _model_path(cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        system.save(path)
        files.append(path)
        trace = system.loss_trace
        if system.flags.get("diverged"):
            print(f"warning: training diverged (final loss {system.flags['final_loss']:.4g})", file=sys.stderr)
    trace_path = out / "loss_trace.csv"
    rows = ["step,loss"] + [f"{k},{v:.10g}" for k, v in enumerate(trace)]
    trace_path.write_bytes(("\n".join(rows) + "\n").encode("ascii"))
    files.append(trace_path)
    write_manifest(out, "train", cfg, files)
    return files


def baseline_link(tag: str, cfg: ExperimentConfig):
    sc = cfg.scenario
    rng = RngStream(sc.seed, SHAPE_STREAM)
    cache = cfg.cache_dir()
    qpsk = square_qam(4)
    if tag == "alamouti_qam":
        return alamouti_link(square_qam(sc.m), sc.nr, sc.pt)
    if tag == "alamouti_gs2":
        return alamouti_link(shaped_constellation(f"c2_{sc.m}", rng, cache), sc.nr, sc.pt)
    if tag == "alamouti_gs4":
        return alamouti_link(shaped_constellation("gs4_256", rng, cache), sc.nr, sc.pt)
    if tag == "svd_qpsk_equal":
        return svd_link({4: qpsk}, sc.pt, split=(4, 4), sigma=cfg.sigma or None, name=tag)
    if tag == "svd_alloc":
        formats, tables = allocation_formats(rng, cache)
        return svd_link(formats, sc.pt, tables, sigma=cfg.sigma or None, name=tag)
    if tag == "zf_qpsk":
        return broadcast_link(qpsk, sc.nt, sc.nr, sc.pt, "zf")
    if tag == "vp_qpsk":
        return broadcast_link(qpsk, sc.nt, sc.nr, sc.pt, "vp", xi=cfg.vp_xi, bound=cfg.vp_range)
    if tag == "ts_qam16":
        return time_share_system(square_qam(16), 2, sc.nb, sc.pt)
    if tag == "ts_gs256":
        return time_share_system(shaped_constellation("gs4_256", rng, cache), 2, sc.nb, sc.pt)
    if tag == "ts_w4_256":
        return time_share_system(lattice_d4(256), 2, sc.nb, sc.pt)
    raise ConfigError(f"unknown baseline {tag!r}")


def cmd_eval(cfg: ExperimentConfig):
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.scenario
    systems = []
    if cfg.include_ae and sc.scenario != "awgn_gs":
        systems.append(("ae", system_link(_load_model(cfg), sigma=cfg.sigma or None)))
    for tag in cfg.baselines:
        systems.append((tag, baseline_link(tag, cfg)))
    if not systems:
        raise ConfigError("nothing to evaluate: no baselines and include_ae is false")
    noise = sc.noise(0.0)
    csvs = []
    for name, link in systems:
        users = range(link.users) if link.users > 1 else [0]
        for u in users:
            suffix = f"_user{u + 1}" if link.users > 1 else ""
            curve = sweep(link, cfg.eval_snr_db, cfg.stop, RngStream(sc.seed, EVAL_STREAM), noise,
                          user=u, workers=cfg.workers, name=name + suffix)
            path = out / f"bler_{name}{suffix}.csv"
            curve.to_csv(path)
            csvs.append(path)
    files = list(csvs)
    if cfg.plot:
        xlabel = "Eb/N0 [dB]" if sc.snr_kind == "ebn0" else "SNR [dB]"
        files.append(write_plot_script(out, csvs, xlabel))
    write_manifest(out, "eval", cfg, files)
    return files


def cmd_derotate(cfg: ExperimentConfig):
    if cfg.scenario.scenario != "interference":
        raise ConfigError("derotate needs an interference-channel model")
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    system = _load_model(cfg)
    x1 = constellation_to_real(transmit_codebook(system, "tx1"))
    x2 = constellation_to_real(transmit_codebook(system, "tx2"))
    rng = RngStream(cfg.scenario.seed, ROTATE_STREAM)
    best = None
    for k in range(max(1, cfg.derotate_starts)):
        theta, rotated, trace = derotate(x1, x2, cfg.derotate_steps, cfg.derotate_lr, rng.derive(k))
        if best is None or trace.min() < best[2].min():
            best = (theta, rotated, trace)
    theta, rotated, trace = best
    files = [out / "theta.txt", out / "rotated_user1.txt", out / "rotated_user2.txt"]
    np.savetxt(files[0], theta, fmt="%.17g")
    for path, mat in zip(files[1:], rotated):
        pts = real_to_points(mat)
        save_constellation(Constellation(pts, path.stem, 1.0, None, {}), path)
    leak = slot_leakage(*rotated)
    print(f"leakage user1 {leak[0]:.4f} user2 {leak[1]:.4f} loss {trace.min():.6g}")
    write_manifest(out, "derotate", cfg, files)
    return files


def cmd_shape(cfg: ExperimentConfig):
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    kw = {}
    if cfg.shape_steps:
        kw["steps"] = cfg.shape_steps
    if cfg.shape_batch:
        kw["batch"] = cfg.shape_batch
    try:
        omega = shaped_constellation(cfg.shape_name, RngStream(cfg.scenario.seed, SHAPE_STREAM),
                                     cfg.cache_dir(), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = out / f"{cfg.shape_name}.txt"
    save_constellation(omega, path)
    write_manifest(out, "shape", cfg, [path])
    return [path]


def cmd_export(cfg: ExperimentConfig):
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    system = _load_model(cfg)
    sc = system.config
    if sc.scenario == "open_loop":
        names = ["tx"]
    elif sc.scenario == "interference":
        names = ["tx1", "tx2"]
    else:
        raise ConfigError(f"{sc.scenario} transmitters depend on the channel and have no fixed constellation")
    files = []
    for name in names:
        pts = transmit_codebook(system, name)
        path = out / f"constellation_{name}.txt"
        save_constellation(Constellation(pts, name, 1.0, None, {}), path)
        files.append(path)
    write_manifest(out, "export", cfg, files)
    return files


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "derotate": cmd_derotate,
    "shape": cmd_shape,
    "export": cmd_export,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="aelab", description="Train and evaluate learned MIMO transceivers.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment INI file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="evaluation worker threads")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<scenario>)")
    return p


def run(command: str, cfg: ExperimentConfig):
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    return COMMANDS[command](cfg)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.scenario = replace(cfg.scenario, seed=args.seed)
        if args.workers is not None:
            cfg = replace(cfg, workers=args.workers)
        if args.out:
            cfg = replace(cfg, out=args.out)
        files = run(args.command, cfg)
    except ConfigError as exc:
        print(f"aelab: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return 0 if not exc.code else 1
    except Exception as exc:           # noqa: BLE001 - one-line diagnostic for harnesses
        print(f"aelab: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
