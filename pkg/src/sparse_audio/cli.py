"""``sparse-audio`` command-line entry point.

Option precedence is command-line flag > JSON config file > built-in default.
The resolved options and seed are logged and written next to the output.
"""

import argparse
import csv
import glob
import json
import logging
import os
import sys
from collections import defaultdict

import numpy as np

from .alca import AdaptConfig, adapt
from .errors import ConfigError, IngestionError, SparseAudioError
from .gammachirp import BankConfig, build_bank, dump_bank_csv, load_bank, save_bank
from .lca import Dictionary, LcaConfig, SparseCode, reconstruct, snr_db
from .pipeline import (
    DatasetManifest,
    EventRepresentation,
    activity_count,
    bin_spike_times,
    encode_dataset,
    fit_length,
    load_wav,
    max_magnitude,
    normalize_01,
    read_spike_csv,
    sparsity_ratio,
    write_wav,
)
from .snn import Network, NetworkSpec, LifConfig, TrainConfig, forward, stack_inputs, train

log = logging.getLogger("sparse_audio")

SEED_ENV = "SPARSE_AUDIO_SEED"
IO_EXIT = 8

# built-in defaults per subcommand; anything here may also come from --config
DEFAULTS = {
    "bank build": {"k": 700, "flen": 1024, "fs": 48000.0, "fmin": 20.0, "fmax": None},
    "bank adapt": {
        "lambda": 0.00045, "stride": 512, "iterations": 64, "step_ratio": 0.01,
        "lr": 0.01, "batch_size": 10, "window": 64, "alpha": 1.0, "epochs": 20,
        "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "pad_seconds": None,
    },
    "encode": {
        "lambda": 0.00045, "stride": 512, "iterations": 64, "step_ratio": 0.01,
        "kind": "lca", "pad_seconds": None, "jobs": 1,
    },
    "normalize": {},
    "stats": {"split": "test"},
    "bin-spikes": {"channels": 700, "duration": 1.28, "bin_width": 0.01},
    "train-readout": {
        "arch": "ff", "hidden": 128, "layers": 1, "epochs": 50, "lr": 0.01, "batch_size": 32,
        "weight_decay": 1e-5, "window": 50, "multiplier": 1.0, "mem_decay": 0.95,
        "syn_decay": 0.85, "threshold": 1.0, "beta": 10.0, "reset": "subtract",
    },
    "synops": {},
    "reconstruct": {},
    "bank dump": {},
}


def _add_common(p):
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def _lca_flags(p):
    p.add_argument("--lambda", dest="lambda", type=float, default=None, help="LCA threshold")
    p.add_argument("--stride", type=int, default=None, help="frame stride r in samples")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--step-ratio", dest="step_ratio", type=float, default=None, help="dt / tau")
    p.add_argument("--pad-seconds", dest="pad_seconds", type=float, default=None,
                   help="zero-pad or truncate every file to this duration")


def build_parser():
    parser = argparse.ArgumentParser(prog="sparse-audio", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    bank = sub.add_parser("bank", help="build, dump or adapt a Gammachirp bank")
    bank_sub = bank.add_subparsers(dest="action", required=True)
    p = bank_sub.add_parser("build", help="Gammatone bank on ERB-spaced centers")
    _add_common(p)
    p.add_argument("--k", type=int, default=None, help="number of channels")
    p.add_argument("--flen", type=int, default=None, help="filter length F_l in samples")
    p.add_argument("--fs", type=float, default=None, help="sample rate in Hz")
    p.add_argument("--fmin", type=float, default=None)
    p.add_argument("--fmax", type=float, default=None, help="defaults to 0.4 * fs")
    p.add_argument("--out", required=True)
    p = bank_sub.add_parser("dump", help="write a bank as CSV")
    _add_common(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p = bank_sub.add_parser("adapt", help="ALCA adaptation of (c, b, l)")
    _add_common(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--corpus", required=True, help="manifest CSV; its train split is used when present")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="per-epoch trace CSV")
    _lca_flags(p)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--window", type=int, default=None, help="TBPTT window in LCA iterations")
    p.add_argument("--alpha", type=float, default=None, help="sparsity penalty scale")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("encode", help="encode a WAV manifest into sparse codes")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=["lca", "alca"], default=None)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (1 = serial)")
    _lca_flags(p)

    p = sub.add_parser("reconstruct", help="resynthesize audio from a sparse code")
    _add_common(p)
    p.add_argument("--code", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="WAV path")
    p.add_argument("--ref", help="reference WAV for SNR")

    p = sub.add_parser("normalize", help="scale representations to [0, 1] by the train-split max")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root with train/ (and valid/, test/)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", help="sparsity ratio and per-class activity")
    _add_common(p)
    p.add_argument("--a", required=True, help="representation directory")
    p.add_argument("--ref", required=True, help="reference directory")
    p.add_argument("--split", default=None, help="split subdirectory to compare (default test)")
    p.add_argument("--out", help="CSV path (stdout if omitted)")

    p = sub.add_parser("bin-spikes", help="histogram external spike-time files")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="CSV path,label,split of channel,time files")
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--bin-width", dest="bin_width", type=float, default=None, help="seconds")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-readout", help="train the spiking readout")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root with train/ and valid/ (or test/)")
    p.add_argument("--arch", choices=["ff", "rec"], default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--window", type=int, default=None, help="TBPTT window (recurrent only)")
    p.add_argument("--multiplier", type=float, default=None, help="init mean in units of sigma")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--beta", type=float, default=None, help="surrogate steepness")
    p.add_argument("--reset", choices=["subtract", "zero"], default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV")

    p = sub.add_parser("synops", help="count synaptic operations of a model on a dataset")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    return parser


def resolve(args, key):
    """Merge defaults, config file and explicit flags into one dict."""
    merged = dict(DEFAULTS[key])
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    for name, value in vars(args).items():
        if name in ("config", "command", "action", "func", "verbose"):
            continue
        if value is not None or name not in merged:
            merged[name] = value
    if merged.get("seed") is None:
        try:
            merged["seed"] = int(os.environ.get(SEED_ENV, 0))
        except ValueError as exc:
            raise ConfigError(f"${SEED_ENV} must be an integer") from exc
    log.info("resolved config: %s", json.dumps(merged, sort_keys=True))
    return merged


def write_sidecar(path, cfg):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _open_out(path):
    return open(path, "w", newline="") if path else _Stdout()


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        return False


def _lca_config(c):
    return LcaConfig(c["lambda"], c["step_ratio"], c["iterations"])


def cmd_bank_build(args):
    c = resolve(args, "bank build")
    bank = build_bank(BankConfig(c["k"], c["flen"], c["fs"], c["fmin"], c["fmax"]))
    save_bank(bank, c["out"])
    write_sidecar(c["out"] + ".config.json", c)
    print(f"wrote {c['out']}: k={bank.num_channels} F_l={bank.filter_len} fs={bank.config.sample_rate_hz}")
    return 0


def cmd_bank_dump(args):
    c = resolve(args, "bank dump")
    bank = load_bank(c["bank"])
    with _open_out(c["out"]) as fh:
        dump_bank_csv(bank, fh)
    return 0


def _corpus_signals(manifest, fs, pad_seconds):
    entries = [e for e in manifest.entries if e.split == "train"] or manifest.entries
    out = []
    for e in entries:
        audio = load_wav(e.path)
        if audio.sample_rate_hz != fs:
            raise IngestionError(f"sample rate {audio.sample_rate_hz} != bank rate {fs}", e.path)
        x = audio.samples
        if pad_seconds is not None:
            x = fit_length(x, int(round(pad_seconds * fs)))
        out.append(x)
    return out


def cmd_bank_adapt(args):
    c = resolve(args, "bank adapt")
    bank0 = load_bank(c["bank"])
    manifest = DatasetManifest.read_csv(c["corpus"])
    corpus = _corpus_signals(manifest, bank0.config.sample_rate_hz, c["pad_seconds"])
    cfg = _lca_config(c)
    acfg = AdaptConfig(
        learning_rate=c["lr"], batch_size=c["batch_size"], tbptt_window=c["window"],
        sparsity_scale=c["alpha"], num_epochs=c["epochs"], adamax_beta1=c["beta1"],
        adamax_beta2=c["beta2"], adamax_eps=c["eps"],
    )

    def report(epoch, _bank, trace):
        log.info("epoch %d: scaled energy %.6g, L0 %.4g", epoch, trace.mean_scaled_energy[-1], trace.mean_l0[-1])

    bank, trace = adapt(corpus, bank0, c["stride"], cfg, acfg, seed=c["seed"], callback=report)
    save_bank(bank, c["out"])
    write_sidecar(c["out"] + ".config.json", c)
    if c["trace"]:
        with open(c["trace"], "w", newline="") as fh:
            trace.write_csv(fh)
    return 0


def cmd_encode(args):
    c = resolve(args, "encode")
    bank = load_bank(c["bank"])
    manifest = DatasetManifest.read_csv(c["manifest"])
    result = encode_dataset(manifest, bank, _lca_config(c), c["stride"], kind=c["kind"],
                            pad_seconds=c["pad_seconds"], jobs=c["jobs"])
    root = c["out"]
    os.makedirs(root, exist_ok=True)
    rows = []
    for item in result.items:
        split_dir = os.path.join(root, item.entry.split)
        os.makedirs(split_dir, exist_ok=True)
        stem = os.path.splitext(os.path.basename(item.entry.path))[0]
        item.representation.save(os.path.join(split_dir, stem + ".evrp"))
        with open(os.path.join(split_dir, stem + ".spcd"), "wb") as fh:
            fh.write(item.code.to_bytes())
        rows.append((item.entry.split, stem, item.entry.label, len(item.code), item.mse, item.energy))
    with open(os.path.join(root, "energy.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "source", "label", "l0", "mse_term", "energy"])
        for r in rows:
            w.writerow([r[0], r[1], "" if r[2] is None else r[2], r[3], repr(r[4]), repr(r[5])])
    snapshot = dict(result.snapshot, entries=len(manifest.entries))
    write_sidecar(os.path.join(root, "encoding.json"), snapshot)
    write_sidecar(os.path.join(root, "config.json"), c)
    for path, msg in result.failures:
        print(f"failed: {msg}", file=sys.stderr)
    print(f"encoded {len(result.items)} of {len(manifest.entries)} files into {root}")
    if result.failures and not result.items:
        return IngestionError.exit_code
    return 0


def cmd_reconstruct(args):
    c = resolve(args, "reconstruct")
    bank = load_bank(c["bank"])
    with open(c["code"], "rb") as fh:
        code = SparseCode.from_bytes(fh.read())
    if code.shape[0] != bank.num_channels:
        raise ConfigError(f"code has {code.shape[0]} channels, bank has {bank.num_channels}")
    d = Dictionary.for_length(bank, code.stride, code.source_len)
    if d.shape != code.shape:
        raise ConfigError(f"code grid {code.shape} does not match bank geometry {d.shape}")
    signal = reconstruct(d, code.to_dense())[: code.source_len]
    write_wav(c["out"], signal, bank.config.sample_rate_hz)
    if c["ref"]:
        ref = load_wav(c["ref"]).samples
        n = min(ref.size, code.source_len)
        print(f"snr_db,{snr_db(ref[:n], signal[:n]):.6f}")
    return 0


def _split_dirs(root):
    return [s for s in ("train", "valid", "test") if os.path.isdir(os.path.join(root, s))]


def _load_reps(directory):
    paths = sorted(glob.glob(os.path.join(directory, "**", "*.evrp"), recursive=True))
    return [EventRepresentation.load(p) for p in paths], paths


def cmd_normalize(args):
    c = resolve(args, "normalize")
    root, out = c["data"], c["out"]
    splits = _split_dirs(root)
    if "train" not in splits:
        raise ConfigError(f"{root} has no train/ split")
    train_reps, _ = _load_reps(os.path.join(root, "train"))
    scale = max_magnitude(train_reps)
    for split in splits:
        reps, paths = _load_reps(os.path.join(root, split))
        if not reps:
            continue
        normed = normalize_01(reps, [split] * len(reps), scale=scale)
        for rep, path in zip(normed, paths):
            dest = os.path.join(out, os.path.relpath(path, root))
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            rep.save(dest)
    write_sidecar(os.path.join(out, "normalization.json"), dict(c, scale=scale))
    print(f"normalized {', '.join(splits)} by {scale!r}")
    return 0


def _pick_split(root, split):
    sub = os.path.join(root, split)
    return sub if os.path.isdir(sub) else root


def cmd_stats(args):
    c = resolve(args, "stats")
    a_reps, _ = _load_reps(_pick_split(c["a"], c["split"]))
    r_reps, _ = _load_reps(_pick_split(c["ref"], c["split"]))
    ratio = sparsity_ratio(a_reps, r_reps)
    per_class = defaultdict(lambda: [[], []])
    for rep in a_reps:
        per_class[rep.label][0].append(activity_count(rep))
    for rep in r_reps:
        per_class[rep.label][1].append(activity_count(rep))
    with _open_out(c["out"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "key", "value"])
        w.writerow(["sparsity_ratio", "", f"{ratio:.6f}"])
        w.writerow(["mean_activity_a", "", f"{np.mean([activity_count(r) for r in a_reps]):.6f}"])
        w.writerow(["mean_activity_ref", "", f"{np.mean([activity_count(r) for r in r_reps]):.6f}"])
        for label in sorted(per_class, key=lambda x: (x is None, x)):
            a_vals, r_vals = per_class[label]
            key = "" if label is None else label
            if a_vals:
                w.writerow(["class_mean_activity_a", key, f"{np.mean(a_vals):.6f}"])
            if r_vals:
                w.writerow(["class_mean_activity_ref", key, f"{np.mean(r_vals):.6f}"])
        energy_csv = os.path.join(c["a"], "energy.csv")
        if os.path.exists(energy_csv):
            with open(energy_csv, newline="") as efh:
                rows = list(csv.DictReader(efh))
            if rows:
                w.writerow(["mean_energy", "", f"{np.mean([float(r['energy']) for r in rows]):.6g}"])
                w.writerow(["mean_mse_term", "", f"{np.mean([float(r['mse_term']) for r in rows]):.6g}"])
                w.writerow(["mean_l0", "", f"{np.mean([float(r['l0']) for r in rows]):.6f}"])
    return 0


def cmd_bin_spikes(args):
    c = resolve(args, "bin-spikes")
    manifest = DatasetManifest.read_csv(c["manifest"])
    for e in manifest.entries:
        rep = bin_spike_times(read_spike_csv(e.path), c["duration"], c["bin_width"], c["channels"], e.label)
        split_dir = os.path.join(c["out"], e.split)
        os.makedirs(split_dir, exist_ok=True)
        rep.save(os.path.join(split_dir, os.path.splitext(os.path.basename(e.path))[0] + ".evrp"))
    write_sidecar(os.path.join(c["out"], "config.json"), c)
    print(f"binned {len(manifest.entries)} files into {c['out']}")
    return 0


def cmd_train_readout(args):
    c = resolve(args, "train-readout")
    root = c["data"]
    train_reps, _ = _load_reps(os.path.join(root, "train"))
    valid_name = "valid" if os.path.isdir(os.path.join(root, "valid")) else "test"
    valid_reps, _ = _load_reps(os.path.join(root, valid_name))
    if not train_reps or not valid_reps:
        raise ConfigError(f"{root} needs nonempty train/ and valid/ (or test/) splits")
    labels = [r.label for r in train_reps + valid_reps]
    if any(lab is None for lab in labels):
        raise ConfigError("every representation needs a label to train")
    spec = NetworkSpec(
        input_size=train_reps[0].grid[0],
        hidden_sizes=(c["hidden"],) * c["layers"],
        recurrent=c["arch"] == "rec",
        num_classes=max(labels) + 1,
        init_multiplier=c["multiplier"],
    )
    lif = LifConfig(c["mem_decay"], c["syn_decay"], c["threshold"], c["reset"], c["beta"])
    net = Network.init(spec, lif, seed=c["seed"])
    tcfg = TrainConfig(c["lr"], c["epochs"], c["batch_size"], c["weight_decay"], c["window"], c["seed"])
    net, train_log = train(net, train_reps, valid_reps, tcfg)
    net.save(c["out"])
    write_sidecar(c["out"] + ".config.json", c)
    if c["log"]:
        with open(c["log"], "w", newline="") as fh:
            train_log.write_csv(fh)
    print(f"final valid accuracy {train_log.valid_accuracy[-1]:.4f}")
    return 0


def cmd_synops(args):
    c = resolve(args, "synops")
    net = Network.load(c["model"])
    splits = _split_dirs(c["data"]) or [""]
    with _open_out(c["out"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "samples", "input_synops", "hidden_synops", "total_synops", "mean_total", "accuracy"])
        for split in splits:
            reps, _ = _load_reps(os.path.join(c["data"], split))
            if not reps:
                continue
            res = forward(net, stack_inputs(reps))
            labels = np.array([-1 if r.label is None else r.label for r in reps])
            acc = float(np.mean(np.argmax(res.scores, axis=1) == labels))
            s = res.synops
            w.writerow([split or ".", len(reps), s.input, s.hidden, s.total, f"{s.total / len(reps):.3f}", f"{acc:.4f}"])
    return 0


COMMANDS = {
    ("bank", "build"): cmd_bank_build,
    ("bank", "dump"): cmd_bank_dump,
    ("bank", "adapt"): cmd_bank_adapt,
    ("encode", None): cmd_encode,
    ("reconstruct", None): cmd_reconstruct,
    ("normalize", None): cmd_normalize,
    ("stats", None): cmd_stats,
    ("bin-spikes", None): cmd_bin_spikes,
    ("train-readout", None): cmd_train_readout,
    ("synops", None): cmd_synops,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    handler = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        return handler(args)
    except SparseAudioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
