"""Command-line entry point: synth, extract, train, attack and eval subcommands.

Every artifact carries a ``format_version`` and the effective configuration.
JSON-lines outputs open with a header record holding that configuration;
the remaining records are tagged with ``record_type``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import __version__
from .attack import KnowledgeError, KnowledgeSpec, MissingModelError, run_attack, select_model
from .audio import (
    MatchReport,
    PipelineConfig,
    WavFormatError,
    detect_keystrokes,
    match_ground_truth,
    read_wav,
)
from .evaluation import (
    anderson_darling,
    baseline,
    chi_square_guess_freq,
    extraction_error_report,
    guessing_cdf,
    improvement_factor,
    p50,
    p50_table,
    ranks_by_pin,
    sig4,
)
from .keypad import InvalidPinError, parse_pin
from .synth import GeneratorConfig, generate_dataset, load_manifest
from .timing import TimingModel, fit_model
from .traces import TYPIST_MODES, KeystrokeTrace, load_traces, read_jsonl, write_jsonl

log = logging.getLogger("pinleak")

CLI_FORMAT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
REPORT_KS = (1, 3, 5, 10)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --- flag parsing helpers ----------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _count(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _snr(text: str) -> float | str:
    if text.lower() == "none":
        return "none"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dB value or 'none', got {text!r}") from None


def _vpk(text: str) -> tuple[int, int]:
    try:
        pos, digit = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected POS:DIGIT (e.g. 0:2), got {text!r}") from None
    if not (0 <= pos <= 3 and 0 <= digit <= 9):
        raise argparse.ArgumentTypeError(f"position must be 0-3 and digit 0-9, got {text!r}")
    return pos, digit


def _digits(text: str) -> tuple[int, ...]:
    cleaned = text.replace(",", "").replace(" ", "")
    if not cleaned.isdigit() or not cleaned.isascii():
        raise argparse.ArgumentTypeError(f"expected digits such as 0,2 or 02, got {text!r}")
    return tuple(sorted({int(ch) for ch in cleaned}))


def _pin_list(text: str) -> tuple[str, ...]:
    try:
        return tuple(parse_pin(p.strip()) for p in text.split(",") if p.strip())
    except InvalidPinError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _resolve(args: argparse.Namespace, section: str, defaults: dict, extra_keys: Iterable[str] = ()) -> dict:
    """Effective settings: flags over the config file's section over defaults."""
    cfg = dict(defaults)
    if args.config is not None:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        sect = dict(data.get(section, {}))
        if "seed" in data and "seed" in defaults:
            sect.setdefault("seed", data["seed"])
        allowed = set(defaults) | set(extra_keys)
        unknown = sorted(set(sect) - allowed)
        if unknown:
            raise UsageError(f"config file {path}: unknown {section} settings {unknown}")
        cfg.update(sect)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _header(command: str, config: dict, **extra) -> dict:
    rec = {"record_type": "header", "format_version": CLI_FORMAT_VERSION, "command": command, "config": config}
    rec.update(extra)
    return rec


def _records(path: Path, kind: str) -> tuple[dict | None, list[dict]]:
    """Header and the records of one type from a pinleak JSON-lines file."""
    try:
        recs = list(read_jsonl(path))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    header = next((r for r in recs if r.get("record_type") == "header"), None)
    if header is not None and header.get("format_version") != CLI_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {header.get('format_version')}")
    return header, [r for r in recs if r.get("record_type") == kind]


def _file_ref(path: Path) -> dict:
    """Location-independent reference to an input file."""
    path = Path(path)
    return {"name": path.name, "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} {p} does not exist")
    return p


def _prepare_output_file(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path.parent}: {exc.strerror}") from None


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    try:
        write_jsonl(path, records)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def _pool_map(fn: Callable, items: Sequence, jobs: int, initializer=None, initargs=()) -> list:
    """Ordered map, fanned out to worker processes when jobs > 1."""
    if jobs <= 1 or len(items) < 2:
        if initializer is not None:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _clean(obj: Any) -> Any:
    """JSON-safe copy: NaN and infinities become null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


# --- synth ---------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "seed": 0,
    "n_pins": 10,
    "entries": 12,
    "typist_mode": "single_finger",
    "noise_snr_db": 0.0,
    "pins": None,
    "audio": True,
    "wav_format": "pcm16",
}
_GENERATOR_FIELDS = {f.name for f in dataclasses.fields(GeneratorConfig)}


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "synth", SYNTH_DEFAULTS, _GENERATOR_FIELDS)
    gen = {k: v for k, v in cfg.items() if k in _GENERATOR_FIELDS}
    if cfg["noise_snr_db"] == "none":
        gen["noise_snr_db"] = None
    if cfg["pins"]:
        gen["pin_source"] = "fixed_list"
        gen["pins"] = tuple(cfg["pins"])
    else:
        gen.pop("pins", None)
    try:
        gcfg = GeneratorConfig.from_dict(gen)
    except (ValueError, TypeError, InvalidPinError) as exc:
        raise UsageError(f"invalid generator settings: {exc}") from None
    n_pins = 0 if gcfg.pin_source == "fixed_list" else cfg["n_pins"]
    if gcfg.pin_source == "uniform_random" and n_pins < 1:
        raise UsageError("--pins must be at least 1")
    try:
        manifest = generate_dataset(gcfg, n_pins, cfg["entries"], Path(args.out), audio=cfg["audio"])
    except OSError as exc:
        raise DataError(str(exc)) from None
    d = manifest.data
    print(f"wrote {d['n_traces']} traces ({d['n_pins']} PINs x {d['entries_per_pin']}) to {args.out}")
    print(f"manifest sha256 {manifest.sha256}")
    return EXIT_OK


# --- extract -------------------------------------------------------------------

EXTRACT_DEFAULTS = {f.name: f.default for f in dataclasses.fields(PipelineConfig)}


def _extract_one(job: tuple) -> dict:
    trace_id, path, rel, pcfg, truth_ts = job
    rec = {"record_type": "detection", "trace_id": trace_id, "file": rel}
    try:
        clip = read_wav(path, expected_rate=pcfg.sample_rate)
        det = detect_keystrokes(clip, pcfg)
    except (WavFormatError, OSError, ValueError) as exc:
        rec.update(status="error", error=str(exc))
        return rec
    rec.update(
        status="ok",
        timestamps_ms=[round(t, 4) for t in det.timestamps_ms],
        n_detected=len(det.timestamps_ms),
        level=round(det.level, 8),
    )
    if truth_ts is not None:
        rec["match"] = match_ground_truth(det, truth_ts, pcfg.match_tolerance_ms).to_record()
    return rec


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "extract", EXTRACT_DEFAULTS)
    try:
        pcfg = PipelineConfig(**cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid pipeline settings: {exc}") from None

    data_dir = Path(args.data)
    try:
        manifest = load_manifest(data_dir)
    except FileNotFoundError:
        raise DataError(f"no manifest.json in {data_dir}") from None
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load manifest in {data_dir}: {exc}") from None
    entries = [e for e in manifest.data.get("traces", []) if "file" in e]
    if not entries:
        raise DataError(f"manifest in {data_dir} lists no audio clips")
    out = Path(args.out) if args.out else data_dir / "detections.jsonl"

    truth = None
    if args.truth is not None:
        truth_path = Path(args.truth) if args.truth else data_dir / manifest.data.get("truth_file", "truth.jsonl")
        truth = {t.trace_id: t for t in _load_traces(truth_path)}
        missing = [e["trace_id"] for e in entries if e["trace_id"] not in truth]
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise DataError(f"truth file {truth_path} lacks {len(missing)} manifest trace_ids: {shown}")
    _prepare_output_file(out)

    jobs = [
        (
            e["trace_id"],
            data_dir / e["file"],
            e["file"],
            pcfg,
            list(truth[e["trace_id"]].timestamps_ms) if truth is not None else None,
        )
        for e in entries
    ]
    results = _pool_map(_extract_one, jobs, args.jobs)
    failures = [r["trace_id"] for r in results if r["status"] != "ok"]
    summary = {
        "record_type": "summary",
        "n_clips": len(results),
        "n_ok": len(results) - len(failures),
        "failures": failures,
    }
    if truth is not None:
        reports = [MatchReport.from_record(r["match"]) for r in results if "match" in r]
        if reports:
            summary["extraction"] = _clean({k: sig4(v) if isinstance(v, float) else v
                                            for k, v in extraction_error_report(reports).items()})
    header = _header("extract", pcfg.to_dict(), manifest_sha256=manifest.sha256, with_truth=truth is not None)
    _write_jsonl(out, [header, *results, summary])
    print(f"processed {summary['n_ok']}/{summary['n_clips']} clips -> {out}")
    for tid in failures:
        err = next(r["error"] for r in results if r["trace_id"] == tid)
        print(f"  failed {tid}: {err}", file=sys.stderr)
    return EXIT_OK


def _load_traces(path: Path) -> list[KeystrokeTrace]:
    p = _require_file(path, "truth file")
    try:
        return load_traces(p)
    except OSError as exc:
        raise DataError(f"cannot read {p}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{p}: malformed truth record ({exc})") from None


def _detected_traces(path: Path, truth: dict[str, KeystrokeTrace] | None) -> tuple[list[KeystrokeTrace], list[dict]]:
    """Traces built from detected timestamps; PIN and mode come from truth when given."""
    _, dets = _records(_require_file(path, "detections file"), "detection")
    traces, skipped = [], []
    for d in dets:
        tid = d["trace_id"]
        if d.get("status") != "ok":
            skipped.append({"trace_id": tid, "error": d.get("error", "extraction failed")})
            continue
        t = truth.get(tid) if truth is not None else None
        traces.append(KeystrokeTrace(tid, tuple(d["timestamps_ms"]),
                                     t.pin if t else None, t.typist_mode if t else None))
    return traces, skipped


# --- train ---------------------------------------------------------------------

TRAIN_DEFAULTS = {"typist_mode": None, "min_samples": 10}


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "train", TRAIN_DEFAULTS)
    if cfg["typist_mode"] is not None and cfg["typist_mode"] not in TYPIST_MODES:
        raise UsageError(f"unknown typist mode {cfg['typist_mode']!r}")
    if not args.truth:
        raise UsageError("train needs at least one --truth file")
    truth: dict[str, KeystrokeTrace] = {}
    for p in args.truth:
        for t in _load_traces(Path(p)):
            truth[t.trace_id] = t
    if args.detections:
        traces, _ = _detected_traces(Path(args.detections), truth)
        traces = [t for t in traces if t.pin is not None and len(t.timestamps_ms) == 4]
    else:
        traces = list(truth.values())
    out = Path(args.out)
    try:
        model = fit_model(traces, mode_filter=cfg["typist_mode"], min_samples=cfg["min_samples"])
    except ValueError as exc:
        raise DataError(f"cannot train: {exc}") from None
    _prepare_output_file(out)
    echo = {
        "config": cfg,
        "truth": [_file_ref(p) for p in args.truth],
        "detections": _file_ref(args.detections) if args.detections else None,
        "n_traces": len(traces),
    }
    try:
        out.write_text(model.dumps() + "# config " + json.dumps(echo, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc.strerror}") from None
    for d in model.diagnostics:
        print(f"  note: {d}", file=sys.stderr)
    flat = " (distance-flat)" if model.distance_flat else ""
    print(f"model {model.model_id} [{model.typist_mode}] from {len(traces)} traces{flat} -> {out}")
    return EXIT_OK


# --- attack --------------------------------------------------------------------

ATTACK_DEFAULTS = {
    "vpk": None,
    "thermal": None,
    "typist_mode": None,
    "oracle_vpk": None,
    "oracle_thermal": False,
    "oracle_mode": False,
    "top": 20,
    "label": None,
}
_BANK: dict[str, TimingModel] = {}


def _set_bank(bank: dict[str, TimingModel]) -> None:
    global _BANK
    _BANK = bank


def _attack_one(job: tuple) -> dict:
    trace, fixed, cfg = job
    rec = {"record_type": "ranking", "trace_id": trace.trace_id}
    try:
        k = fixed
        if trace.pin is not None and (cfg["oracle_vpk"] is not None or cfg["oracle_thermal"] or cfg["oracle_mode"]):
            oracle = KnowledgeSpec.from_truth(trace.pin, cfg["oracle_vpk"], cfg["oracle_thermal"])
            k = KnowledgeSpec(
                vpk=fixed.vpk if fixed.vpk is not None else oracle.vpk,
                thermal_keys=fixed.thermal_keys if fixed.thermal_keys is not None else oracle.thermal_keys,
                typist_mode=trace.typist_mode if cfg["oracle_mode"] else fixed.typist_mode,
            )
        ranking = run_attack(_BANK, trace.gaps, k)
    except (ValueError, MissingModelError) as exc:
        rec.update(status="error", error=str(exc), true_pin=trace.pin)
        return rec
    rec.update(ranking.to_record(trace.trace_id, cfg["top"], trace.pin))
    rec["status"] = "ok"
    return rec


def _attack_label(cfg: dict) -> str:
    if cfg["label"]:
        return cfg["label"]
    parts = ["BA"]
    mode = cfg["typist_mode"]
    if cfg["oracle_mode"]:
        parts.append("MODE")
    elif mode in ("single_finger", "other"):
        parts.append({"single_finger": "SFP", "other": "OP"}[mode])
    if cfg["vpk"] is not None:
        parts.append(f"VPK{cfg['vpk'][0] + 1}")
    elif cfg["oracle_vpk"] is not None:
        parts.append(f"VPK{cfg['oracle_vpk'] + 1}")
    if cfg["thermal"] is not None or cfg["oracle_thermal"]:
        parts.append("T")
    return "+".join(parts)


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "attack", ATTACK_DEFAULTS)
    if cfg["vpk"] is not None and cfg["oracle_vpk"] is not None:
        raise UsageError("--vpk and --oracle-vpk are mutually exclusive")
    if cfg["thermal"] is not None and cfg["oracle_thermal"]:
        raise UsageError("--thermal and --oracle-thermal are mutually exclusive")
    if cfg["typist_mode"] is not None and cfg["oracle_mode"]:
        raise UsageError("--mode and --oracle-mode are mutually exclusive")
    if cfg["oracle_vpk"] is not None and not 0 <= int(cfg["oracle_vpk"]) <= 3:
        raise UsageError("--oracle-vpk position must be 0-3")
    oracle = cfg["oracle_vpk"] is not None or cfg["oracle_thermal"] or cfg["oracle_mode"]
    if oracle and not args.truth:
        raise UsageError("oracle knowledge flags need --truth")
    if not args.truth and not args.detections:
        raise UsageError("attack needs --truth or --detections as the source of gaps")
    try:
        fixed = KnowledgeSpec(
            vpk=tuple(cfg["vpk"]) if cfg["vpk"] is not None else None,
            thermal_keys=frozenset(cfg["thermal"]) if cfg["thermal"] is not None else None,
            typist_mode=cfg["typist_mode"],
        )
    except KnowledgeError as exc:
        raise UsageError(f"contradictory knowledge: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    bank: dict[str, TimingModel] = {}
    for p in args.model:
        path = _require_file(p, "model file")
        try:
            m = TimingModel.load(path)
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: malformed model ({exc})") from None
        if m.typist_mode in bank:
            raise DataError(f"two models for typist mode {m.typist_mode!r}")
        bank[m.typist_mode] = m
    if not cfg["oracle_mode"]:
        try:
            select_model(bank, fixed.typist_mode)
        except MissingModelError as exc:
            raise DataError(str(exc)) from None

    truth = {t.trace_id: t for t in _load_traces(Path(args.truth))} if args.truth else None
    if args.detections:
        traces, skipped = _detected_traces(Path(args.detections), truth)
    else:
        traces, skipped = list(truth.values()), []
    if not traces:
        raise DataError("no traces to attack")
    out = Path(args.out)
    _prepare_output_file(out)

    results = _pool_map(_attack_one, [(t, fixed, cfg) for t in traces], args.jobs, _set_bank, (bank,))
    for s in skipped:
        results.append({"record_type": "ranking", "trace_id": s["trace_id"], "status": "error",
                        "error": s["error"], "true_pin": truth[s["trace_id"]].pin if truth and s["trace_id"] in truth else None})
    results.sort(key=lambda r: r["trace_id"])
    label = _attack_label(cfg)
    echo = dict(cfg, vpk=list(cfg["vpk"]) if cfg["vpk"] else None,
                thermal=list(cfg["thermal"]) if cfg["thermal"] is not None else None)
    header = _header("attack", echo, label=label,
                     models={mode: m.model_id for mode, m in sorted(bank.items())},
                     source="detections" if args.detections else "truth")
    n_err = sum(r["status"] != "ok" for r in results)
    _write_jsonl(out, [header, *results])
    print(f"{label}: ranked {len(results) - n_err}/{len(results)} traces -> {out}")
    return EXIT_OK


# --- eval ----------------------------------------------------------------------

EVAL_DEFAULTS = {"k_max": 100, "baselines": None, "p50": False, "p50_top": 5, "chi2_k": 5}


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args, "eval", EVAL_DEFAULTS)
    k_max = int(cfg["k_max"])
    if k_max < max(REPORT_KS) or cfg["chi2_k"] > k_max:
        raise UsageError(f"--k-max must be at least {max(REPORT_KS)} and at least --chi2-k")
    kinds = [b.upper() for b in (cfg["baselines"] or [])]
    bad = [b for b in kinds if b not in ("RG", "RGVPK", "RGT", "RGTVPK")]
    if bad:
        raise UsageError(f"unknown baseline(s) {bad}")
    if not args.rankings and not args.detections:
        raise UsageError("eval needs --rankings and/or --detections")

    conditions = []
    for p in args.rankings or []:
        path = _require_file(p, "rankings file")
        header, recs = _records(path, "ranking")
        if not recs:
            raise DataError(f"{path} holds no ranking records")
        if any(r.get("true_pin") is None for r in recs):
            raise DataError(f"{path}: rankings lack ground truth (run attack with --truth)")
        label = (header or {}).get("label") or path.stem
        used = {c["label"] for c in conditions}
        base_label, i = label, 2
        while label in used:
            label, i = f"{base_label}#{i}", i + 1
        hcfg = (header or {}).get("config", {})
        vpk_pos = hcfg.get("vpk")[0] if hcfg.get("vpk") else hcfg.get("oracle_vpk")
        conditions.append({
            "label": label,
            "source": _file_ref(path),
            "pins": [r["true_pin"] for r in recs],
            "ranks": [r.get("true_rank") if r.get("status") == "ok" else None for r in recs],
            "vpk_position": 0 if vpk_pos is None else int(vpk_pos),
        })

    match_reports = []
    if args.detections:
        _, dets = _records(_require_file(args.detections, "detections file"), "detection")
        match_reports = [MatchReport.from_record(d["match"]) for d in dets if "match" in d]
        if not match_reports:
            raise DataError(f"{args.detections}: no match fields (run extract with --truth)")

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc.strerror}") from None

    report: dict[str, Any] = {"format_version": CLI_FORMAT_VERSION, "command": "eval", "config": cfg}
    cdfs = {}
    report["conditions"] = []
    for c in conditions:
        cdf = guessing_cdf(c["ranks"], k_max, c["label"])
        cdfs[c["label"]] = cdf
        entry = {
            "label": c["label"],
            "source": c["source"],
            "n_trials": cdf.n_trials,
            "n_not_found": sum(r is None for r in c["ranks"]),
            "counts_at": {str(k): int(cdf.counts[k - 1]) for k in REPORT_KS},
            "cdf_at": {str(k): sig4(cdf.at(k)) for k in REPORT_KS},
            "cdf_file": f"cdf_{_safe(c['label'])}.csv",
        }
        if kinds:
            entry["improvement"] = {}
            for kind in kinds:
                base = baseline(kind, k_max, c["pins"], c["vpk_position"])
                entry["improvement"][kind] = {str(k): sig4(improvement_factor(cdf, base, k)) for k in REPORT_KS}
        report["conditions"].append(entry)
        try:
            (out_dir / entry["cdf_file"]).write_text(cdf.to_csv(), encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write {out_dir / entry['cdf_file']}: {exc.strerror}") from None

    if len(conditions) > 1:
        first = conditions[0]["label"]
        report["chi_square"] = []
        for c in conditions[1:]:
            res = chi_square_guess_freq(cdfs[first], cdfs[c["label"]], cfg["chi2_k"])
            report["chi_square"].append({
                "a": first, "b": c["label"], "k": cfg["chi2_k"],
                "table": [list(row) for row in res.table],
                "statistic": sig4(res.statistic), "p_value": sig4(res.p_value),
                "low_expected": res.low_expected,
            })

    if match_reports:
        rep = extraction_error_report(match_reports)
        report["extraction"] = {k: sig4(v) if isinstance(v, float) else v for k, v in rep.items()}
        errors = [e for m in match_reports for e in m.errors.tolist()]
        try:
            ad = anderson_darling(errors)
            report["anderson_darling"] = {
                "statistic": sig4(ad.statistic), "n": ad.n,
                "critical_1pct": ad.critical_1pct, "normal_at_1pct": ad.normal_at_1pct,
            }
        except ValueError as exc:
            report["anderson_darling"] = {"error": str(exc)}

    if cfg["p50"]:
        if not conditions:
            raise UsageError("--p50 needs --rankings")
        columns = {}
        for c in conditions:
            by_pin = {p: r for p, r in ranks_by_pin(c["pins"], c["ranks"]).items() if len(r) >= 2}
            columns[c["label"]] = p50(by_pin) if by_pin else []
        report["p50"] = {
            label: [{"pin": r.pin, "attempts": r.attempts, "n_trials": r.n_trials} for r in recs[: cfg["p50_top"]]]
            for label, recs in columns.items()
        }
        (out_dir / "p50.txt").write_text(p50_table(columns, cfg["p50_top"]), encoding="utf-8")

    (out_dir / "report.json").write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for entry in report.get("conditions", []):
        line = "  ".join(f"CDF@{k}={entry['cdf_at'][str(k)]}" for k in REPORT_KS)
        print(f"{entry['label']:<16} n={entry['n_trials']}  {line}")
        for kind, vals in entry.get("improvement", {}).items():
            print(f"{'':<16} x{kind}: " + "  ".join(f"@{k}={vals[str(k)]}" for k in REPORT_KS))
    if "extraction" in report:
        ex = report["extraction"]
        print(f"extraction: rate={ex['detection_rate']} mean={ex['mean_error_ms']} ms "
              f"p75|gap|={ex['abs_gap_error_p75_ms']} ms")
    print(f"report -> {out_dir / 'report.json'}")
    return EXIT_OK


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label)


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="JSON settings file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="pinleak", description="PIN inference from keypad feedback-beep timing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a labelled synthetic dataset")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--pins", dest="n_pins", type=_positive_int, help="number of random PINs (default 10)")
    s.add_argument("--pin-list", dest="pins", type=_pin_list, metavar="PINS",
                   help="comma-separated PINs to use instead of random ones")
    s.add_argument("--entries", type=_positive_int, help="entries per PIN (default 12)")
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", dest="typist_mode", choices=TYPIST_MODES)
    s.add_argument("--snr", dest="noise_snr_db", type=_snr, metavar="DB", help="noise SNR in dB or 'none'")
    s.add_argument("--wav-format", choices=("pcm16", "float32"))
    s.add_argument("--no-audio", dest="audio", action="store_const", const=False,
                   help="write ground truth only")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", parents=[common], help="detect keystrokes in a dataset's clips")
    e.add_argument("--data", required=True, metavar="DIR", help="dataset directory with manifest.json")
    e.add_argument("--out", metavar="FILE", help="detections JSON-lines (default DIR/detections.jsonl)")
    e.add_argument("--truth", nargs="?", const="", metavar="FILE",
                   help="add match statistics against ground truth (default: the manifest's truth file)")
    e.add_argument("--sample-rate", dest="sample_rate", type=_positive_int)
    e.add_argument("--order", dest="filter_order", type=_positive_int)
    e.add_argument("--center", dest="center_freq", type=float, metavar="HZ")
    e.add_argument("--bandwidth", type=float, metavar="HZ")
    e.add_argument("--gate", dest="gate_threshold", type=float)
    e.add_argument("--window", dest="window_samples", type=_positive_int, metavar="SAMPLES")
    e.add_argument("--min-sep", dest="min_separation_ms", type=float, metavar="MS")
    e.add_argument("--tolerance", dest="match_tolerance_ms", type=float, metavar="MS")
    e.add_argument("--peak-snr", dest="peak_snr", type=float)
    e.add_argument("--entry-gap", dest="entry_gap_ms", type=float, metavar="MS")
    e.add_argument("--jobs", type=_positive_int, default=1)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", parents=[common], help="fit a per-distance-class timing model")
    t.add_argument("--truth", action="append", metavar="FILE", help="ground-truth traces (repeatable)")
    t.add_argument("--detections", metavar="FILE", help="train on detected timestamps, labelled by --truth")
    t.add_argument("--mode", dest="typist_mode", choices=TYPIST_MODES, help="train on one typist mode")
    t.add_argument("--min-samples", dest="min_samples", type=_positive_int)
    t.add_argument("--out", required=True, metavar="FILE")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", parents=[common], help="rank candidate PINs for each trace")
    a.add_argument("--model", action="append", required=True, metavar="FILE", help="timing model (repeatable)")
    a.add_argument("--truth", metavar="FILE", help="ground-truth traces (gaps and labels)")
    a.add_argument("--detections", metavar="FILE", help="take gaps from detected timestamps")
    a.add_argument("--vpk", type=_vpk, metavar="POS:DIGIT", help="known digit at 0-based position")
    a.add_argument("--thermal", type=_digits, metavar="DIGITS", help="known set of pressed keys, e.g. 0,2")
    a.add_argument("--mode", dest="typist_mode", choices=("single_finger", "other"))
    a.add_argument("--oracle-vpk", dest="oracle_vpk", type=int, metavar="POS",
                   help="simulate knowing each true PIN's digit at POS")
    a.add_argument("--oracle-thermal", dest="oracle_thermal", action="store_const", const=True,
                   help="simulate knowing each true PIN's key set")
    a.add_argument("--oracle-mode", dest="oracle_mode", action="store_const", const=True,
                   help="use the model matching each trace's typist mode")
    a.add_argument("--top", type=_count, help="candidates kept per record (default 20)")
    a.add_argument("--label", help="condition label for reports")
    a.add_argument("--out", required=True, metavar="FILE")
    a.add_argument("--jobs", type=_positive_int, default=1)
    a.set_defaults(func=cmd_attack)

    v = sub.add_parser("eval", parents=[common], help="guessing CDFs, baselines and reports")
    v.add_argument("--rankings", action="append", metavar="FILE", help="attack output (repeatable)")
    v.add_argument("--detections", metavar="FILE", help="extract output with match fields")
    v.add_argument("--out", required=True, metavar="DIR")
    v.add_argument("--k-max", dest="k_max", type=_positive_int)
    v.add_argument("--baseline", dest="baselines", action="append",
                   choices=("rg", "rgvpk", "rgt", "rgtvpk", "RG", "RGVPK", "RGT", "RGTVPK"))
    v.add_argument("--p50", action="store_const", const=True, help="write a per-PIN P50 table")
    v.add_argument("--p50-top", dest="p50_top", type=_positive_int)
    v.add_argument("--chi2-k", dest="chi2_k", type=_positive_int, help="attempt window for the chi-square test")
    v.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
