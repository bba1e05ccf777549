"""Command-line entry point: gen-data, train, sample, eval, inspect.

All randomness flows from a single 64-bit run seed through named substreams,
so every artifact is reproducible from the manifest written next to it.

Exit codes: 0 success, 2 config/usage error, 3 numeric failure, 4 IO failure.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import copuladata as cd
from . import evalkit, mvae
from .errors import ConfigError, MrfVaeError, NumericError, ParseError, TrainingError

_SUBSTREAMS = {"data": 0, "init": 1, "train": 2, "sample": 3, "eval": 4}


def substream_seed(seed: int, name: str) -> int:
    """Derive the named substream's seed from the run seed."""
    ss = np.random.SeedSequence([int(seed), _SUBSTREAMS[name]])
    return int(ss.generate_state(1, np.uint64)[0])


def substream_rng(seed: int, name: str):
    return np.random.default_rng(substream_seed(seed, name))


def _take(doc: dict, section: str, allowed, where: str):
    sub = doc.pop(section, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{where}: '{section}' must be an object")
    unknown = set(sub) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys in '{section}': {sorted(unknown)}")
    return sub


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully materialized run document: model + data + eval settings + seed."""

    model: mvae.ModelConfig
    data: cd.CopulaSpec
    eval_n: int = 10_000
    eval_mode: str = "unconditional"
    out: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.eval_n < 1:
            raise ConfigError(f"eval n must be positive, got {self.eval_n}")
        if self.eval_mode not in ("unconditional", "conditional"):
            raise ConfigError(f"unknown eval mode {self.eval_mode!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a u64, got {self.seed}")

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "out": self.out,
            "model": dataclasses.asdict(self.model),
            "data": {k: v for k, v in dataclasses.asdict(self.data).items()
                     if k != "correlations"},
            "eval": {"n": self.eval_n, "mode": self.eval_mode},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus CLI overrides.

    Every default is materialized so the emitted manifest reproduces the run
    by itself. Unknown keys anywhere in the document are rejected.
    """
    doc = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ParseError(f"cannot read config {path}: {e}") from e
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path}: top level must be an object")

    model_kw = _take(doc, "model", _MODEL_FIELDS, "config")
    data_kw = _take(doc, "data", _DATA_FIELDS, "config")
    eval_kw = _take(doc, "eval", ("n", "mode"), "config")
    top = {"seed": doc.pop("seed", 0), "out": doc.pop("out", "runs")}
    if doc:
        raise ConfigError(f"config: unknown top-level keys: {sorted(doc)}")

    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key in ("seed", "out"):
            top[key] = val
        elif key in _MODEL_FIELDS:
            model_kw[key] = val
        else:
            raise ConfigError(f"unsupported override {key!r}")

    seed = int(top["seed"])
    model_kw.setdefault("seed", substream_seed(seed, "init"))
    data_kw.setdefault("seed", substream_seed(seed, "data"))
    for tup_key in ("latent_dims", "input_dims", "enc_hidden", "dec_hidden",
                    "cov_hidden", "pot_hidden"):
        if tup_key in model_kw:
            model_kw[tup_key] = tuple(model_kw[tup_key])
    for tup_key in ("mus", "sigmas"):
        if tup_key in data_kw:
            data_kw[tup_key] = tuple(data_kw[tup_key])
    return RunConfig(
        model=mvae.ModelConfig(**model_kw),
        data=cd.CopulaSpec(**data_kw),
        eval_n=int(eval_kw.get("n", 10_000)),
        eval_mode=eval_kw.get("mode", "unconditional"),
        out=str(top["out"]),
        seed=seed,
    )


_MODEL_FIELDS = tuple(f.name for f in dataclasses.fields(mvae.ModelConfig))
_DATA_FIELDS = tuple(f.name for f in dataclasses.fields(cd.CopulaSpec)
                     if f.name != "correlations")


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise ParseError(f"cannot write {path}: {e}") from e


def _load_dataset(path, m: int, d: int) -> np.ndarray:
    try:
        with open(path) as fh:
            header = fh.readline()
    except OSError as e:
        raise ParseError(f"cannot read dataset {path}: {e}") from e
    ncols = len(header.strip().split(","))
    if ncols != m * d:
        raise ConfigError(
            f"dataset {path} has {ncols} columns, model expects {m * d}")
    return cd.load(path, m, d)


def _load_checkpoint(path) -> mvae.Model:
    if not Path(path).exists():
        raise ParseError(f"checkpoint not found: {path}")
    return mvae.load_model(path)


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed, "out": args.out})
    out = Path(cfg.out)
    full = cd.sample(cfg.data)
    train, heldout = cd.split(full, n_train=cfg.data.n // 2)
    out.mkdir(parents=True, exist_ok=True)
    cd.save(train, out / "train.csv", cfg.data.m, cfg.data.d)
    cd.save(heldout, out / "heldout.csv", cfg.data.m, cfg.data.d)
    _write(out / "manifest.json", cfg.to_json())
    print(f"wrote {len(train)} train / {len(heldout)} heldout rows to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {
        "seed": args.seed, "out": args.out,
        "variant": args.variant, "beta": args.beta,
    })
    out = Path(cfg.out)
    if args.resume:
        model = _load_checkpoint(args.resume)
    else:
        model = mvae.Model(cfg.model)
    data = _load_dataset(args.data, len(model.config.input_dims),
                         model.config.input_dims[0])
    epochs = args.epochs if args.epochs is not None else 200
    model.train(data, epochs=epochs, batch_size=args.batch_size)
    out.mkdir(parents=True, exist_ok=True)
    mvae.save_model(model, out / "checkpoint.json")
    rows = ["epoch,elbo,recon,regularizer"]
    rows += [f'{r["epoch"]},{r["elbo"]:.17g},{r["recon"]:.17g},'
             f'{r["regularizer"]:.17g}' for r in model.loss_trace]
    _write(out / "loss_trace.csv", "\n".join(rows) + "\n")
    _write(out / "manifest.json", cfg.to_json())
    last = model.loss_trace[-1]
    print(f"trained {model.epochs_done} epochs; final elbo {last['elbo']:.6g}")
    return 0


def _parse_condition(spec: str) -> int:
    if not spec.startswith("mod="):
        raise ConfigError(f"--condition must look like mod=K, got {spec!r}")
    try:
        j = int(spec[4:])
    except ValueError:
        raise ConfigError(f"--condition modality must be an integer: {spec!r}")
    return j - 1  # user-facing modalities are 1-based, like the CSV header


def cmd_sample(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    rng = substream_rng(args.seed if args.seed is not None else 0, "sample")
    m = len(model.config.latent_dims)
    d = model.config.input_dims[0]
    if args.condition is None:
        out = model.generate(args.n, rng)
    else:
        j = _parse_condition(args.condition)
        if not 0 <= j < m:
            raise ConfigError(f"unknown modality {j + 1}; model has {m}")
        if args.values is None:
            raise ConfigError("--condition requires --values FILE")
        obs = _load_dataset(args.values, m, d)
        lo, hi = j * d, (j + 1) * d
        free = model.conditional_generate(j, obs[:, lo:hi], rng)
        out = np.empty((len(obs), model.x_total))
        out[:, lo:hi] = obs[:, lo:hi]
        cols = [c for i in range(m) if i != j for c in range(i * d, (i + 1) * d)]
        out[:, cols] = free
    cd.save(out, args.out_file, m, d)
    print(f"wrote {len(out)} rows to {args.out_file}")
    return 0


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    m = len(model.config.latent_dims)
    d = model.config.input_dims[0]
    heldout = _load_dataset(args.heldout, m, d)
    seed = args.seed if args.seed is not None else 0
    rng = substream_rng(seed, "eval")
    if args.mode == "unconditional":
        report = evalkit.evaluate_unconditional(
            model.generate, heldout, args.n, rng, m=m, d=d, seed=seed)
    else:
        report = evalkit.evaluate_conditional(
            model.conditional_generate, heldout, args.n, rng, m=m, d=d, seed=seed)
    if not all(np.isfinite(v) for v in report.per_coordinate.values()):
        raise NumericError("evaluation produced non-finite distances")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / f"report_{args.mode}.csv", evalkit.report_to_csv(report))
    text = evalkit.report_to_text(report)
    _write(out / f"report_{args.mode}.txt", text)
    print(text)
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint is None and args.config is None:
        raise ConfigError("inspect needs --checkpoint and/or --config")
    if args.config is not None:
        cfg = load_run_config(args.config, {})
        print(cfg.to_json(), end="")
    if args.checkpoint is not None:
        model = _load_checkpoint(args.checkpoint)
        n_params = sum(v.data.size for v in model.params().values())
        c = model.config
        print(f"variant:      {c.variant}")
        print(f"modalities:   {len(c.latent_dims)} "
              f"(latent {c.latent_dims}, input {c.input_dims})")
        print(f"beta:         {c.beta}")
        print(f"mask density: {c.mask_density} "
              f"({int(model.mask.sum())}/{model.n_off} off-diagonals kept)")
        print(f"parameters:   {n_params}")
        print(f"epochs done:  {model.epochs_done}")
        if model.loss_trace:
            print(f"final elbo:   {model.loss_trace[-1]['elbo']:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrfvae",
                                description="MRF-structured multimodal VAEs")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the copula benchmark dataset")
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--data", required=True, help="training CSV")
    t.add_argument("--variant", choices=mvae.VARIANTS, default=None)
    t.add_argument("--beta", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", dest="out_file", default="samples.csv")
    s.add_argument("--condition", default=None, metavar="mod=K",
                   help="condition on modality K (1-based)")
    s.add_argument("--values", default=None, help="CSV of observed rows")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="scaled Wasserstein-1 report vs held-out data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--heldout", required=True)
    e.add_argument("--mode", choices=("unconditional", "conditional"),
                   default="unconditional")
    e.add_argument("-n", type=int, default=10_000)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print checkpoint/config summaries")
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--config", default=None)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (NumericError, TrainingError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ParseError, OSError) as e:
        print(f"io failure: {e}", file=sys.stderr)
        return 4
    except (MrfVaeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
