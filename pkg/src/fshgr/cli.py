"""``fshgr`` command-line tool.

Subcommands: synth, catalog, preprocess, train, eval, gradcheck, replay and
rerun. Each long-running command writes a JSON run manifest before doing
any work; ``fshgr rerun --manifest PATH`` repeats the run from it and
checks that the metrics come out bit-identical.

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthSpec, build_catalog, generate_synthetic
from .episodes import (
    CROSS_SUBJECT,
    SAME_SUBJECT,
    SCENARIOS,
    build_meta_split,
    episodes_from_replay,
    read_replay,
    sample_episodes,
    write_replay,
)
from .errors import CatalogError, DivergenceError, FormatError, ParameterError, SamplingError
from .layers import AttentionConfig, EmbeddingConfig, ModelConfig, init_params, load_model_config, save_model_config
from .preprocessing import load_norm_stats, save_norm_stats
from .training import TrainConfig, evaluate_episodes, params_checksum, train

log = logging.getLogger("fshgr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EMBEDDINGS = ("fc", "lstm", "tblock1", "tblock2")
MODES = (SAME_SUBJECT, CROSS_SUBJECT)
SPLIT_CHOICES = ("train", "val", "test")


class UsageError(Exception):
    """Invalid command line or config file."""


class NumericFailure(Exception):
    """A numerical check failed (gradient check, rerun mismatch)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# option resolution: defaults < command-line flags < config file
# ---------------------------------------------------------------------------

# dest -> (converter, default); None default means "required or derived"
_OPTIONS: dict[str, dict[str, tuple]] = {
    "synth": {
        "out": (str, None),
        "subjects": (positive_int, 8),
        "gestures": (positive_int, 10),
        "reps": (positive_int, 6),
        "duration": (positive_float, 5.0),
        "channels": (positive_int, 12),
        "fs": (positive_float, 2000.0),
        "seed": (nonneg_int, 0),
    },
    "catalog": {"data": (str, None)},
    "preprocess": {
        "data": (str, None),
        "scenario": (str, "new-subjects"),
        "include_rest": (_bool, False),
        "out": (str, None),
    },
    "train": {
        "data": (str, None),
        "scenario": (str, "new-subjects"),
        "n": (positive_int, 5),
        "k": (positive_int, 1),
        "embedding": (str, "fc"),
        "out": (str, None),
        "seed": (nonneg_int, 0),
        "lr": (positive_float, 1e-4),
        "batch_size": (positive_int, None),
        "max_steps": (nonneg_int, 30000),
        "eval_every": (positive_int, 500),
        "eval_episodes": (positive_int, 1000),
        "mode": (str, SAME_SUBJECT),
        "label_shuffle": (_bool, True),
        "include_rest": (_bool, False),
        "workers": (positive_int, None),
        "d_k": (positive_int, 64),
        "d_v": (positive_int, 32),
        "causal_mask": (_bool, True),
        "tcn_filters": (positive_int, 128),
        "out_dim": (positive_int, 128),
        "hidden_time": (positive_int, 100),
    },
    "eval": {
        "checkpoint": (str, None),
        "model_config": (str, None),
        "data": (str, None),
        "scenario": (str, None),
        "split": (str, "test"),
        "episodes": (positive_int, 1000),
        "seed": (nonneg_int, 0),
        "mode": (str, SAME_SUBJECT),
        "label_shuffle": (_bool, True),
        "include_rest": (_bool, None),
        "replay_out": (str, None),
        "workers": (positive_int, None),
    },
    "gradcheck": {
        "seed": (nonneg_int, 0),
        "h": (positive_float, 1e-5),
        "tol": (positive_float, 1e-4),
        "max_coords": (positive_int, 24),
    },
    "replay": {
        "replay": (str, None),
        "data": (str, None),
        "scenario": (str, "new-subjects"),
        "split": (str, "test"),
        "include_rest": (_bool, False),
        "checkpoint": (str, None),
        "model_config": (str, None),
        "show": (nonneg_int, 3),
    },
}

_CHOICES = {
    "scenario": SCENARIOS,
    "embedding": EMBEDDINGS,
    "mode": MODES,
    "split": SPLIT_CHOICES,
}
_REQUIRED = {
    "synth": ("out",),
    "catalog": ("data",),
    "preprocess": ("data", "out"),
    "train": ("data", "out"),
    "eval": ("checkpoint", "data"),
    "replay": ("replay", "data"),
}
# keys whose values are file paths, resolved relative to the config file
_PATH_KEYS = {"out", "data", "checkpoint", "model_config", "replay", "replay_out"}


def read_config_file(path, command: str) -> dict:
    """Options for ``command`` from an INI file.

    Keys may sit in a section named after the command or in ``[run]``;
    the command section wins. Key names are the long flag names with
    underscores or dashes. Relative paths are taken relative to the file.
    """
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    spec = _OPTIONS[command]
    out = {}
    for section in ("run", command):
        if not cp.has_section(section):
            continue
        for key, text in cp[section].items():
            dest = key.replace("-", "_")
            if dest not in spec:
                raise UsageError(f"{path}: unknown option {key!r} for {command} (known: {', '.join(sorted(spec))})")
            out[dest] = _convert(dest, spec[dest][0], text, f"{path} [{section}]")
            if dest in _PATH_KEYS:
                p = Path(out[dest])
                out[dest] = str(p if p.is_absolute() else Path(path).resolve().parent / p)
    return out


def _convert(dest, conv, value, where):
    try:
        value = conv(value)
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise UsageError(f"{where}: invalid value for {dest}: {exc}") from None
    if dest in _CHOICES and value not in _CHOICES[dest]:
        raise UsageError(f"{where}: invalid choice for {dest}: {value!r} (choose from {', '.join(_CHOICES[dest])})")
    return value


def resolve_options(command: str, flags: dict, config_path=None) -> dict:
    """Materialize every option of ``command``.

    Built-in defaults are overridden by flags given on the command line,
    which are in turn overridden by the config file.
    """
    spec = _OPTIONS[command]
    resolved = {dest: default for dest, (_, default) in spec.items()}
    resolved.update({k: v for k, v in flags.items() if k in spec and v is not None})
    if config_path:
        from_file = read_config_file(config_path, command)
        for k, v in from_file.items():
            if k in flags and flags[k] is not None and flags[k] != v:
                log.warning("config file sets %s=%r, overriding the flag value %r", k, v, flags[k])
        resolved.update(from_file)
    missing = [k for k in _REQUIRED.get(command, ()) if resolved.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if "workers" in resolved and resolved["workers"] is None:
        resolved["workers"] = _default_workers()
    # absolute paths keep the manifest valid from any working directory
    for k in _PATH_KEYS & resolved.keys():
        if resolved[k] is not None:
            resolved[k] = str(Path(resolved[k]).resolve())
    return resolved


def _default_workers() -> int:
    env = os.environ.get("FSHGR_WORKERS")
    if env:
        try:
            return positive_int(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"FSHGR_WORKERS: {exc}") from None
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command: str, resolved: dict, seeds: dict, artifacts: dict) -> dict:
    manifest = {
        "tool": "fshgr",
        "version": __version__,
        "command": command,
        "resolved": resolved,
        "seeds": seeds,
        "artifacts": artifacts,
        "created": _now(),
        "argv": sys.argv[1:],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def finish_manifest(path, manifest: dict, metrics: dict) -> None:
    manifest = dict(manifest, metrics=metrics, finished=_now())
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands; each returns a metrics dict (deterministic values only)
# ---------------------------------------------------------------------------


def cmd_synth(o: dict) -> dict:
    spec = SynthSpec(
        n_subjects=o["subjects"], n_gestures=o["gestures"], n_reps=o["reps"],
        duration_s=o["duration"], fs=o["fs"], n_channels=o["channels"],
    )
    out = Path(o["out"])
    paths = generate_synthetic(spec, out, seed=o["seed"])
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(p.relative_to(out)).encode())
        h.update(p.read_bytes())
    catalog = build_catalog(out)
    print(f"wrote {len(paths)} recordings to {out}")
    print(catalog.summary())
    return {"files": len(paths), "tree_sha256": h.hexdigest()}


def cmd_catalog(o: dict) -> dict:
    catalog = build_catalog(o["data"])
    print(catalog.summary())
    for s, (n_g, n_r) in catalog.coverage().items():
        print(f"subject={s} gestures={n_g} repetitions={n_r}")
    return {"recordings": len(catalog)}


def _meta_split(data, scenario, include_rest):
    catalog = build_catalog(data)
    if not len(catalog):
        raise CatalogError(f"no recordings under {data}")
    return build_meta_split(catalog, scenario, include_rest=include_rest)


def _split_metrics(ms) -> dict:
    return {
        split: {"windows": len(ms.pool(split)), "clamped_fraction": ms.clamped[split]}
        for split in ("meta_train", "meta_val", "meta_test")
    }


def cmd_preprocess(o: dict) -> dict:
    ms = _meta_split(o["data"], o["scenario"], o["include_rest"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_norm_stats(out / "scale.fsn", ms.stats.scale)
    save_norm_stats(out / "minmax.fsn", ms.stats.minmax)
    splits = {
        split: [list(k) for k in ms.pool(split).keys]
        for split in ("meta_train", "meta_val", "meta_test")
    }
    (out / "split.json").write_text(json.dumps({"scenario": ms.scenario, "val_from_train": ms.val_from_train, "splits": splits}, indent=1) + "\n")
    metrics = _split_metrics(ms)
    for split, m in metrics.items():
        print(f"split={split} recordings={len(splits[split])} windows={m['windows']} clamped={m['clamped_fraction']:.6f}")
    metrics["scale_sha256"] = _sha256_file(out / "scale.fsn")
    metrics["minmax_sha256"] = _sha256_file(out / "minmax.fsn")
    return metrics


def model_config_from_options(o: dict) -> ModelConfig:
    return ModelConfig(
        embedding=EmbeddingConfig(kind=o["embedding"], out_dim=o["out_dim"], hidden_time=o["hidden_time"]),
        n_way=o["n"],
        k_shot=o["k"],
        tcn_filters=o["tcn_filters"],
        attention=AttentionConfig(d_k=o["d_k"], d_v=o["d_v"], causal_mask=o["causal_mask"]),
        seed=o["seed"],
    )


def cmd_train(o: dict) -> dict:
    out = Path(o["out"])
    ms = _meta_split(o["data"], o["scenario"], o["include_rest"])
    first = ms.meta_train.signals[0] if ms.meta_train.signals else None
    channels = first.shape[1] if first is not None else 12
    model_cfg = model_config_from_options(o)
    model_cfg.embedding.input_channels = channels
    model_cfg.embedding.window_len = ms.prep.window_samples
    train_cfg = TrainConfig(
        lr=o["lr"], batch_size=o["batch_size"], max_steps=o["max_steps"], eval_every=o["eval_every"],
        eval_episodes=o["eval_episodes"], seed=o["seed"], scenario=o["scenario"], n_way=o["n"], k_shot=o["k"],
        sampling_mode=o["mode"], label_shuffle=o["label_shuffle"], workers=o["workers"],
    )
    save_model_config(out / "model.cfg", model_cfg)
    save_norm_stats(out / "scale.fsn", ms.stats.scale)
    save_norm_stats(out / "minmax.fsn", ms.stats.minmax)
    log.info("batch size %d, %d meta-train windows", train_cfg.resolved_batch_size, len(ms.meta_train))
    with open(out / "report.txt", "w") as report_fh:
        def on_record(rec):
            print(rec.line(), flush=True)
            report_fh.write(rec.line() + "\n")
            report_fh.flush()

        params, report = train(ms, model_cfg, train_cfg, out_dir=out, on_record=on_record)
    save_checkpoint(out / "model.fsh", params)
    report.write(out)
    for split, r in report.final.items():
        print(f"final {split}: accuracy={r['accuracy']:.4f} +- {r['stderr']:.4f}")
    return {
        "best_step": report.best_step,
        "batch_size": train_cfg.resolved_batch_size,
        "final": report.final,
        "params_sha256": params_checksum(params),
        "checkpoint_sha256": _sha256_file(out / "model.fsh"),
    }


def _load_model(checkpoint, model_config):
    """Checkpoint plus its config, with a descriptive error on any mismatch."""
    checkpoint = Path(checkpoint)
    cfg_path = Path(model_config) if model_config else checkpoint.with_name("model.cfg")
    if not cfg_path.exists():
        raise FileNotFoundError(f"model config {cfg_path} not found; pass --model-config")
    cfg = load_model_config(cfg_path)
    params = load_checkpoint(checkpoint, requires_grad=False)
    expected = {n: p.shape for n, p in init_params(cfg).items()}
    problems = []
    for name in expected.keys() - params.keys():
        problems.append(f"missing tensor {name} {expected[name]}")
    for name in params.keys() - expected.keys():
        problems.append(f"unexpected tensor {name} {params[name].shape}")
    for name in expected.keys() & params.keys():
        if expected[name] != params[name].shape:
            problems.append(f"{name}: checkpoint shape {params[name].shape}, config expects {expected[name]}")
    if problems:
        raise FormatError(
            f"checkpoint {checkpoint} does not match config {cfg_path}: " + "; ".join(sorted(problems)[:8])
            + (f" (+{len(problems) - 8} more)" if len(problems) > 8 else "")
        )
    return cfg, {n: params[n] for n in expected}, cfg_path


def _run_info(checkpoint) -> dict:
    """Resolved options of the train run that produced ``checkpoint``, if known."""
    m = Path(checkpoint).with_name("manifest.json")
    if m.exists():
        try:
            return json.loads(m.read_text()).get("resolved", {})
        except json.JSONDecodeError:
            return {}
    return {}


def _check_pool_shape(cfg: ModelConfig, ms) -> None:
    pool = ms.meta_train
    if pool.signals and pool.signals[0].shape[1] != cfg.embedding.input_channels:
        raise FormatError(f"data has {pool.signals[0].shape[1]} channels, model expects {cfg.embedding.input_channels}")
    if pool.window != cfg.embedding.window_len:
        raise FormatError(f"data windows are {pool.window} samples, model expects {cfg.embedding.window_len}")


def cmd_eval(o: dict) -> dict:
    cfg, params, _ = _load_model(o["checkpoint"], o["model_config"])
    scenario = o["scenario"]
    ms = _meta_split(o["data"], scenario, o["include_rest"])
    _check_pool_shape(cfg, ms)
    ckpt_dir = Path(o["checkpoint"]).parent
    for name, stats in (("scale.fsn", ms.stats.scale), ("minmax.fsn", ms.stats.minmax)):
        side = ckpt_dir / name
        if side.exists():
            saved = load_norm_stats(side)
            if not (np.array_equal(saved.mins, stats.mins) and np.array_equal(saved.maxs, stats.maxs)):
                log.warning("normalization statistics in %s differ from those refit on %s", side, o["data"])
    pool = ms.pool(o["split"])
    episodes = sample_episodes(pool, o["episodes"], cfg.n_way, cfg.k_shot, o["mode"], o["seed"], o["label_shuffle"], workers=o["workers"])
    res = evaluate_episodes(params, episodes, cfg, o["workers"])
    replay_out = Path(o["replay_out"]) if o["replay_out"] else ckpt_dir / f"eval_{o['split']}_seed{o['seed']}.fsep"
    replay_out.parent.mkdir(parents=True, exist_ok=True)
    write_replay(replay_out, episodes, o["seed"], cfg.n_way, cfg.k_shot)
    print(f"scenario={scenario} split={o['split']} episodes={res.n_episodes} accuracy={res.accuracy:.4f} +- {res.stderr:.4f} loss={res.loss:.6f}")
    print(f"replay written to {replay_out}")
    return {
        "accuracy": res.accuracy,
        "stderr": res.stderr,
        "loss": res.loss,
        "episodes": res.n_episodes,
        "correct_sha256": hashlib.sha256(np.packbits(res.correct).tobytes()).hexdigest(),
        "replay_sha256": _sha256_file(replay_out),
    }


def cmd_gradcheck(o: dict) -> dict:
    from .gradcheck import run_suite

    start = time.perf_counter()
    rows = run_suite(seed=o["seed"], h=o["h"], tol=o["tol"], max_coords=o["max_coords"])
    width = max(len(name) for name, _, _ in rows)
    failed = []
    for name, rep, ok in rows:
        print(f"{name:<{width}}  max_rel_err={rep.max_rel_error:.3e}  checked={rep.n_checked:<5d} excluded={rep.n_excluded:<3d} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    print(f"{len(rows) - len(failed)}/{len(rows)} passed in {time.perf_counter() - start:.1f}s")
    if failed:
        raise NumericFailure("gradient check failed for: " + ", ".join(failed))
    return {"passed": len(rows), "max_rel_error": {name: rep.max_rel_error for name, rep, _ in rows}}


def cmd_replay(o: dict) -> dict:
    replay = read_replay(o["replay"])
    ms = _meta_split(o["data"], o["scenario"], o["include_rest"])
    pool = ms.pool(o["split"])
    episodes = episodes_from_replay(pool, replay, materialize=o["checkpoint"] is not None)
    print(f"replay seed={replay.seed} N={replay.n_way} k={replay.k_shot} mode={replay.mode} episodes={len(episodes)}")
    for i, ep in enumerate(episodes[: o["show"]]):
        print(f"episode {i}: slots={ep.slot_gestures} query_label={ep.query_label} query={ep.provenance[-1]}")
    metrics = {"episodes": len(episodes)}
    if o["checkpoint"]:
        cfg, params, _ = _load_model(o["checkpoint"], o["model_config"])
        if (cfg.n_way, cfg.k_shot) != (replay.n_way, replay.k_shot):
            raise FormatError(f"replay is {replay.n_way}-way {replay.k_shot}-shot, model is {cfg.n_way}-way {cfg.k_shot}-shot")
        res = evaluate_episodes(params, episodes, cfg)
        print(f"accuracy={res.accuracy:.4f} +- {res.stderr:.4f} loss={res.loss:.6f}")
        metrics.update(accuracy=res.accuracy, stderr=res.stderr, loss=res.loss)
    return metrics


COMMANDS = {
    "synth": cmd_synth,
    "catalog": cmd_catalog,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "replay": cmd_replay,
}


def _manifest_plan(command: str, o: dict) -> tuple[Path | None, dict, dict]:
    """Where the manifest goes, the named seeds and the artifact paths."""
    seeds = {"seed": o.get("seed")} if "seed" in o else {}
    if command == "synth":
        out = Path(o["out"])
        return out / "manifest.json", {"recordings": f"SeedSequence([{o['seed']}, 2, subject, gesture, rep])"}, {"root": str(out)}
    if command == "preprocess":
        out = Path(o["out"])
        return out / "manifest.json", {}, {n: str(out / n) for n in ("scale.fsn", "minmax.fsn", "split.json")}
    if command == "train":
        out = Path(o["out"])
        seeds = {"init": o["seed"], "episodes": f"SeedSequence({o['seed']}).spawn(3)[0]",
                 "meta_val": f"SeedSequence({o['seed']}).spawn(3)[1]", "meta_test": f"SeedSequence({o['seed']}).spawn(3)[2]"}
        names = ("model.fsh", "model.cfg", "report.txt", "summary.json", "scale.fsn", "minmax.fsn")
        return out / "manifest.json", seeds, {n: str(out / n) for n in names}
    if command == "eval":
        ckpt = Path(o["checkpoint"])
        # unset scenario options follow the train run that produced the checkpoint
        info = _run_info(ckpt)
        if o["scenario"] is None:
            o["scenario"] = info.get("scenario", "new-subjects")
        if o["include_rest"] is None:
            o["include_rest"] = bool(info.get("include_rest", False))
        replay = o["replay_out"] or str(ckpt.parent / f"eval_{o['split']}_seed{o['seed']}.fsep")
        o["replay_out"] = replay
        return Path(replay).with_suffix(".manifest.json"), {"episodes": o["seed"]}, {"replay": replay, "checkpoint": str(ckpt)}
    return None, seeds, {}


def run_command(command: str, resolved: dict, manifest_path=None) -> dict:
    default_path, seeds, artifacts = _manifest_plan(command, resolved)
    path = Path(manifest_path) if manifest_path else default_path
    manifest = write_manifest(path, command, resolved, seeds, artifacts) if path else None
    metrics = COMMANDS[command](resolved)
    if manifest is not None:
        finish_manifest(path, manifest, metrics)
    return metrics


def cmd_rerun(manifest_path, out=None) -> dict:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except FileNotFoundError:
        raise UsageError(f"manifest {manifest_path} not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", path=manifest_path) from None
    command = manifest.get("command")
    if command not in COMMANDS:
        raise FormatError(f"manifest names unknown command {command!r}", path=manifest_path)
    resolved = dict(manifest["resolved"])
    recorded = manifest.get("metrics")
    rerun_path = None
    if out is not None:
        out = Path(out)
        if "out" in resolved:
            resolved["out"] = str(out)
        elif command == "eval":
            resolved["replay_out"] = str(out / Path(resolved["replay_out"]).name)
        rerun_path = out / "manifest.json" if "out" not in resolved else None
    else:
        # keep the original manifest untouched
        rerun_path = Path(manifest_path).with_suffix(".rerun.json")
    if "workers" in resolved:
        resolved["workers"] = _default_workers()
    print(f"re-running {command} from {manifest_path}")
    metrics = json.loads(json.dumps(run_command(command, resolved, rerun_path)))
    if recorded is None:
        print("manifest has no recorded metrics; nothing to compare")
    elif metrics != recorded:
        diffs = [k for k in sorted(set(metrics) | set(recorded)) if metrics.get(k) != recorded.get(k)]
        raise NumericFailure("rerun metrics differ from the manifest in: " + ", ".join(diffs))
    else:
        print("metrics identical to the manifest")
    return metrics


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _flag(p, dest, help, **kw):
    p.add_argument("--" + dest.replace("_", "-"), dest=dest, default=None, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fshgr", description="Few-shot sEMG gesture recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"fshgr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p, config=True, manifest=True):
        if config:
            p.add_argument("--config", help="INI file; its values override flags")
        if manifest:
            p.add_argument("--manifest", help="manifest path (default depends on the command)")

    p = sub.add_parser("synth", help="generate a synthetic FSE1 dataset")
    _flag(p, "out", "output directory")
    _flag(p, "subjects", "number of subjects (default 8)", type=positive_int)
    _flag(p, "gestures", "number of gestures (default 10)", type=positive_int)
    _flag(p, "reps", "repetitions per gesture (default 6)", type=positive_int)
    _flag(p, "duration", "seconds per recording (default 5)", type=positive_float)
    _flag(p, "channels", "electrode channels (default 12)", type=positive_int)
    _flag(p, "fs", "sampling rate in Hz (default 2000)", type=positive_float)
    _flag(p, "seed", "random seed (default 0)", type=nonneg_int)
    common(p)

    p = sub.add_parser("catalog", help="index and summarize a recording tree")
    _flag(p, "data", "FSE1 data root")
    common(p, manifest=False)

    p = sub.add_parser("preprocess", help="fit normalization statistics for a scenario")
    _flag(p, "data", "FSE1 data root")
    _flag(p, "scenario", "generalization scenario", choices=SCENARIOS)
    p.add_argument("--include-rest", dest="include_rest", action="store_const", const=True, default=None, help="keep gesture 0")
    _flag(p, "out", "output directory for FSN1 sidecars")
    common(p)

    p = sub.add_parser("train", help="episodic meta-training")
    _flag(p, "data", "FSE1 data root")
    _flag(p, "scenario", "generalization scenario (default new-subjects)", choices=SCENARIOS)
    _flag(p, "n", "classes per episode (default 5)", type=positive_int)
    _flag(p, "k", "support examples per class (default 1)", type=positive_int)
    _flag(p, "embedding", "embedding module (default fc)", choices=EMBEDDINGS)
    _flag(p, "out", "output directory")
    _flag(p, "seed", "random seed (default 0)", type=nonneg_int)
    _flag(p, "lr", "Adam learning rate (default 1e-4)", type=positive_float)
    _flag(p, "batch_size", "episodes per step (default 64, or 32 for 10-way 5-shot)", type=positive_int)
    _flag(p, "max_steps", "optimizer steps (default 30000)", type=nonneg_int)
    _flag(p, "eval_every", "steps between meta-val evaluations (default 500)", type=positive_int)
    _flag(p, "eval_episodes", "episodes per evaluation (default 1000)", type=positive_int)
    _flag(p, "mode", "episode sampling mode", choices=MODES)
    p.add_argument("--no-label-shuffle", dest="label_shuffle", action="store_const", const=False, default=None,
                   help="keep a fixed gesture-to-slot order")
    p.add_argument("--include-rest", dest="include_rest", action="store_const", const=True, default=None, help="keep gesture 0")
    _flag(p, "workers", "parallel workers (default FSHGR_WORKERS or all cores)", type=positive_int)
    _flag(p, "d_k", "attention key size (default 64)", type=positive_int)
    _flag(p, "d_v", "attention value size (default 32)", type=positive_int)
    p.add_argument("--no-causal-mask", dest="causal_mask", action="store_const", const=False, default=None,
                   help="let attention see later positions")
    _flag(p, "tcn_filters", "filters per temporal block (default 128)", type=positive_int)
    _flag(p, "out_dim", "embedding channel width (default 128)", type=positive_int)
    _flag(p, "hidden_time", "embedding hidden time length (default 100)", type=positive_int)
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fixed episode stream")
    _flag(p, "checkpoint", "FSH1 checkpoint")
    _flag(p, "model_config", "model INI (default: model.cfg next to the checkpoint)")
    _flag(p, "data", "FSE1 data root")
    _flag(p, "scenario", "scenario (default: the one the checkpoint was trained on)", choices=SCENARIOS)
    _flag(p, "split", "split to evaluate (default test)", choices=SPLIT_CHOICES)
    _flag(p, "episodes", "number of episodes (default 1000)", type=positive_int)
    _flag(p, "seed", "episode stream seed (default 0)", type=nonneg_int)
    _flag(p, "mode", "episode sampling mode", choices=MODES)
    p.add_argument("--no-label-shuffle", dest="label_shuffle", action="store_const", const=False, default=None,
                   help="keep a fixed gesture-to-slot order")
    p.add_argument("--include-rest", dest="include_rest", action="store_const", const=True, default=None, help="keep gesture 0")
    _flag(p, "replay_out", "FSEP replay path (default next to the checkpoint)")
    _flag(p, "workers", "parallel workers (default FSHGR_WORKERS or all cores)", type=positive_int)
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    _flag(p, "seed", "random seed (default 0)", type=nonneg_int)
    _flag(p, "h", "finite-difference step (default 1e-5)", type=positive_float)
    _flag(p, "tol", "relative error threshold (default 1e-4)", type=positive_float)
    _flag(p, "max_coords", "coordinates checked per model tensor (default 24)", type=positive_int)
    common(p)

    p = sub.add_parser("replay", help="inspect or re-evaluate an FSEP replay file")
    _flag(p, "replay", "FSEP file")
    _flag(p, "data", "FSE1 data root")
    _flag(p, "scenario", "scenario the replay was drawn from", choices=SCENARIOS)
    _flag(p, "split", "split the replay was drawn from (default test)", choices=SPLIT_CHOICES)
    p.add_argument("--include-rest", dest="include_rest", action="store_const", const=True, default=None, help="keep gesture 0")
    _flag(p, "checkpoint", "evaluate the episodes with this checkpoint")
    _flag(p, "model_config", "model INI (default: model.cfg next to the checkpoint)")
    _flag(p, "show", "episodes to print (default 3)", type=nonneg_int)
    common(p, manifest=False)

    p = sub.add_parser("rerun", help="repeat a run from its manifest and compare metrics")
    p.add_argument("--manifest", required=True, help="manifest.json written by an earlier run")
    p.add_argument("--out", help="write artifacts here instead of the original location")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        # eval records are already printed as they arrive
        logging.getLogger("fshgr.training").setLevel(logging.WARNING)
    try:
        if args.command == "rerun":
            cmd_rerun(args.manifest, args.out)
        else:
            flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config", "manifest")}
            resolved = resolve_options(args.command, flags, getattr(args, "config", None))
            run_command(args.command, resolved, getattr(args, "manifest", None))
    except (UsageError, ParameterError) as exc:
        print(f"fshgr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CatalogError, SamplingError, OSError, KeyError) as exc:
        print(f"fshgr {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, DivergenceError) as exc:
        print(f"fshgr {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
