"""Command line front end: train, eval, screen, mem, codegen, bench.

Exit codes: 0 success, 1 runtime failure (bad file, diverged run, missing
compiler), 2 usage error.  Every randomized command takes --seed
(default 0) so repeated runs are byte-identical; only bench's wall-clock
numbers vary.
"""

from __future__ import annotations

import statistics
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import dataio, memory, presets, screening, trainer
from . import model as m
from .bitops import BitTensor
from .codegen import CodegenOptions, find_c_compiler, generate
from .errors import CodegenError, TemplateError, TrainingDivergedError
from .inference import InputTensor, network_forward

__all__ = ["main"]

_SYNTH_TRAIN = 600
_SYNTH_EVAL = 200


def _argument_parser():
    import argparse

    top = argparse.ArgumentParser(
        prog="microbnn",
        description="Train, screen and deploy binarized networks "
                    "that fit in kilobytes.")
    sub = top.add_subparsers(dest="command", required=True)

    def add_data_flags(p, role):
        p.add_argument("--data", metavar="SRC",
                       help="dataset: 'synth' / 'synth:N' for the built-in "
                            "glyph images, a directory with IDX files, or "
                            "a CIFAR10 batch (.bin)")
        p.add_argument("--images", metavar="IDX",
                       help=f"{role} images as a raw IDX file")
        p.add_argument("--labels", metavar="IDX",
                       help=f"{role} labels as a raw IDX file")

    def add_train_flags(p):
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--batch-size", type=int, default=100)
        p.add_argument("--lr", type=float, default=1e-3,
                       help="Adam learning rate")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--eval-split", type=float, default=0.1)

    p = sub.add_parser("train", help="fit one architecture, write the model")
    p.add_argument("--arch", required=True, choices=sorted(presets.PRESETS),
                   help="architecture preset")
    add_data_flags(p, "training")
    add_train_flags(p)
    p.add_argument("--budget", type=int, default=None,
                   help="reject architectures whose M exceeds this")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--checkpoint", action="store_true",
                   help="also write the latent sidecar next to the model")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="accuracy of a model on a dataset")
    p.add_argument("--model", required=True)
    add_data_flags(p, "evaluation")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for synthetic evaluation data")
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("screen",
                       help="train every candidate in a family, rank by "
                            "accuracy under the byte budget")
    p.add_argument("--family", required=True,
                   choices=sorted(screening.FAMILIES))
    p.add_argument("--budget", type=int, default=15360)
    add_data_flags(p, "training")
    add_train_flags(p)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--best-out", help="write the best model here")
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.set_defaults(func=_cmd_screen)

    p = sub.add_parser("mem", help="memory report for a model or preset")
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--model")
    grp.add_argument("--arch", choices=sorted(presets.PRESETS))
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.set_defaults(func=_cmd_mem)

    p = sub.add_parser("codegen", help="emit standalone C for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="model")
    p.add_argument("--raw-bn", action="store_true",
                   help="keep raw batch norm instead of folded thresholds")
    p.add_argument("--caller-arena", action="store_true",
                   help="predict takes the working buffer as an argument")
    p.add_argument("--vectors", type=int, default=0,
                   help="embed this many random self-test vectors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check", action="store_true",
                   help="compile and run the embedded self-test "
                        "($MICROBNN_CC or $CC names the compiler)")
    p.set_defaults(func=_cmd_codegen)

    p = sub.add_parser("bench", help="per-sample latency of a model on host")
    p.add_argument("--model", required=True)
    add_data_flags(p, "benchmark")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.set_defaults(func=_cmd_bench)
    return top


def _load_model(path) -> m.Network:
    return m.deserialize(Path(path).read_bytes())


def _synth_count(spec: str, default: int) -> int:
    if ":" not in spec:
        return default
    _, _, count = spec.partition(":")
    return int(count)


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _dataset(args, role: str) -> dataio.LabeledDataset:
    """Resolve the --images/--labels pair, --data name, or fail."""
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise ValueError("--images and --labels go together")
        return dataio.load_idx(args.images, args.labels)
    if not args.data:
        raise ValueError("no dataset: pass --data or --images/--labels")
    if args.data.startswith("synth"):
        seed = getattr(args, "seed", 0)
        if role == "train":
            return dataio.synth_images(_synth_count(args.data, _SYNTH_TRAIN),
                                       seed=seed)
        return dataio.synth_images(_synth_count(args.data, _SYNTH_EVAL),
                                   seed=seed + 1)
    path = Path(args.data)
    if path.is_dir():
        images, labels = _MNIST_NAMES["train" if role == "train" else "test"]
        return dataio.load_idx(path / images, path / labels)
    if path.suffix == ".bin":
        return dataio.load_cifar10(path)
    raise ValueError(f"cannot resolve dataset {args.data!r}: not a "
                     "directory, .bin batch, or 'synth'")


def _train_config(args, budget=None) -> trainer.TrainConfig:
    return trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               learning_rate=args.lr, seed=args.seed,
                               budget_bytes=budget,
                               eval_split=args.eval_split)


def _random_inputs(net: m.Network, n: int, seed: int) -> list:
    """Grid-quantized random samples matching the model's input contract."""
    rng = np.random.default_rng(seed)
    spec = net.input_spec
    out = []
    for _ in range(n):
        if spec.kind == "real":
            q = rng.integers(-256, 257, size=spec.shape)
            out.append(InputTensor.from_array((q / 256.0).astype(np.float32)))
        else:
            out.append(BitTensor.from_planes(
                rng.integers(0, 2, size=spec.shape) * 2 - 1))
    return out


def _cmd_train(args) -> int:
    arch = presets.PRESETS[args.arch]()
    data = _dataset(args, "train")
    result = trainer.train(arch, data, _train_config(args, args.budget))
    for ep in result.history:
        print(f"epoch {ep.epoch}: loss {ep.loss:.4f} "
              f"eval accuracy {ep.accuracy:.4f}")
    if args.checkpoint:
        trainer.save_checkpoint(result.latent, args.out)
    else:
        Path(args.out).write_bytes(m.serialize(result.net))
    r = memory.memory_report(result.net)
    print(f"wrote {args.out}: P={r.P} T={r.T} M={r.M} bytes")
    return 0


def _cmd_eval(args) -> int:
    net = _load_model(args.model)
    data = _dataset(args, "test")
    res = trainer.evaluate(net, data)
    if args.format == "records":
        print(f"accuracy={res.accuracy:.6f}")
        for i, (good, total) in enumerate(zip(res.per_class_correct,
                                              res.per_class_total)):
            print(f"class_{i}={good}/{total}")
    else:
        print(f"accuracy {res.accuracy:.4f} "
              f"({sum(res.per_class_correct)}/{sum(res.per_class_total)})")
    return 0


def _cmd_screen(args) -> int:
    space = screening.mnist_space(args.family, args.budget)
    data = _dataset(args, "train")
    report = screening.screen(space, data, _train_config(args),
                              top_k=args.top_k, jobs=args.jobs,
                              best_path=args.best_out)
    if args.format == "records":
        for line in screening.results_records(report):
            print(line)
    else:
        print(screening.results_table(report))
    if args.best_out:
        print(f"best model written to {args.best_out}")
    return 0


def _cmd_mem(args) -> int:
    net = presets.PRESETS[args.arch]() if args.arch else _load_model(args.model)
    r = memory.memory_report(net)
    if args.format == "records":
        print(memory.report_records(r))
        if args.budget is not None:
            print(f"budget={args.budget}")
            print(f"fits={str(r.M <= args.budget).lower()}")
    else:
        print(memory.report_table(r))
        if args.budget is not None:
            verdict = "fits" if r.M <= args.budget else "exceeds"
            print(f"M = {r.M} B {verdict} budget {args.budget} B")
    return 0


def _cmd_codegen(args) -> int:
    net = _load_model(args.model)
    vectors = tuple(_random_inputs(net, args.vectors, args.seed))
    if args.check and not vectors:
        raise ValueError("--check needs --vectors >= 1 to have "
                         "something to run")
    opts = CodegenOptions(prefix=args.prefix,
                          emit_folded_bn=not args.raw_bn,
                          static_arena=not args.caller_arena,
                          test_vectors=vectors)
    code = generate(net, opts)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, source = code.write(out_dir)
    print(f"wrote {header}")
    print(f"wrote {source}")
    if args.check:
        cc = find_c_compiler()
        if cc is None:
            raise CodegenError("no C compiler found; set MICROBNN_CC or CC")
        with tempfile.TemporaryDirectory() as tmp:
            exe = str(Path(tmp) / "self_test")
            flags = ["-std=c99", "-O2", "-ffp-contract=off",
                     "-DEBNN_SELF_TEST"]
            libs = []
            if args.raw_bn:
                flags.append("-DEBNN_RAW_BN")
                libs.append("-lm")
            cmd = [*cc, *flags, str(source), "-o", exe, *libs]
            build = subprocess.run(cmd, capture_output=True, text=True)
            if build.returncode != 0:
                raise CodegenError(f"self-test build failed:\n{build.stderr}")
            run = subprocess.run([exe], capture_output=True, text=True)
            sys.stdout.write(run.stdout)
            if run.returncode != 0:
                raise CodegenError("self-test reported mismatches")
        print(f"self-test passed ({len(vectors)} vectors)")
    return 0


def _cmd_bench(args) -> int:
    net = _load_model(args.model)
    if args.data or args.images:
        data = _dataset(args, "test")
        spec = net.input_spec
        samples = []
        for s in data.samples[:args.runs]:
            if spec.kind == "real":
                samples.append(s)
            else:
                samples.append(BitTensor.from_planes(
                    np.where(s.data >= 0, 1, -1)))
    else:
        samples = _random_inputs(net, min(args.runs, 32), args.seed)
    times = []
    for i in range(args.runs):
        inp = samples[i % len(samples)]
        t0 = time.perf_counter()
        network_forward(net, inp)
        times.append((time.perf_counter() - t0) * 1e3)
    mean = statistics.fmean(times)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    if args.format == "records":
        print(f"runs={args.runs}")
        print(f"mean_ms={mean:.4f}")
        print(f"stddev_ms={std:.4f}")
    else:
        print(f"{args.runs} runs: {mean:.3f} ms/sample "
              f"(stddev {std:.3f} ms)")
    return 0


def main(argv=None) -> int:
    parser = _argument_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, TrainingDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
