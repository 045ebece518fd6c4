"""Command-line entry point: preprocess, build-graph, train, eval, recommend.

Every subcommand resolves its configuration as built-in defaults, then the
``--config`` file (flat ``key=value`` lines), then ``--key value`` flags, and
writes the result into the artifact directory before doing any work.

Exit codes: 0 success, 1 I/O failure, 2 invalid input or config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from giffcf.binfmt import CheckpointError, format_kv, parse_kv
from giffcf.dataio import DEFAULT_RATIOS, InteractionDataset, load_interactions, split_dataset
from giffcf.graph import EigenSolverError, ItemGraph, build_item_graph
from giffcf.inference import NumericalError, infer, recommend_topk
from giffcf.training import TrainConfig, fit, load_model

log = logging.getLogger("giffcf")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3
MODELS = ("giffcf", "linkprop", "gfcf", "giffcf-filter")


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    artifact_dir: str = "artifacts"
    ratios: tuple = DEFAULT_RATIOS
    gfcf_omega: float = 0.3
    mask_val: bool = False
    train: TrainConfig = TrainConfig()

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_text(self) -> str:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        flat.update(asdict(self.train))
        return format_kv(flat)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        own = {f.name: f.default for f in fields(cls) if f.name != "train"}
        train_keys = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(values) - set(own) - train_keys)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for key, raw in values.items():
            if key in own:
                kw[key] = _coerce(raw, own[key])
        train = TrainConfig.from_dict({k: v for k, v in values.items() if k in train_keys})
        cfg = cls(train=train, **kw)
        if len(cfg.ratios) != 3 or any(r < 0 for r in cfg.ratios):
            raise ValueError("ratios must be three nonnegative numbers")
        return cfg


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    return type(default)(raw)


def _config_keys() -> list:
    keys = [f.name for f in fields(RunConfig) if f.name != "train"]
    return keys + [f.name for f in fields(TrainConfig)]


def resolve_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(parse_kv(Path(args.config).read_text(encoding="utf-8")))
    for key in _config_keys():
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            values[key] = v
    return RunConfig.from_dict(values)


def echo_config(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.artifact_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}_config.txt"
    path.write_text(f"# resolved configuration for '{command}'\n" + cfg.to_text(), encoding="utf-8")
    return path


# -- subcommands -------------------------------------------------------------


def cmd_preprocess(args, cfg: RunConfig) -> int:
    raw = load_interactions(args.input)
    data = split_dataset(raw, cfg.ratios, cfg.seed)
    out = Path(args.out or cfg.data_dir)
    data.save(out)
    print(f"{len(raw)} interactions, {data.n_users} users, {data.n_items} items -> {out}")
    print(f"train {data.train.nnz}  val {data.val.nnz}  test {data.test.nnz}")
    return EXIT_OK


def cmd_fetch_ml1m(args, cfg: RunConfig) -> int:
    from giffcf.movielens import prepare_ml1m

    counts = prepare_ml1m(args.out, args.cache)
    print(f"{counts['interactions']} interactions, {counts['users']} users, {counts['items']} items -> {args.out}")
    return EXIT_OK


def _graph_path(args, cfg: RunConfig) -> Path:
    return Path(getattr(args, "graph", None) or Path(cfg.artifact_dir) / "graph.bin")


def cmd_build_graph(args, cfg: RunConfig) -> int:
    data = InteractionDataset.load(cfg.data_dir)
    gcfg = cfg.train.graph_config().validate(data.n_items)
    g = build_item_graph(data, gcfg, seed=cfg.seed)
    path = _graph_path(args, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    g.save(path)
    eig = f", {g.eigvecs.shape[1]} eigenpairs" if g.eigvecs.shape[1] else ", eigendecomposition skipped"
    print(f"graph: {data.n_items} items, nnz {g.A_lp.nnz}, norm {g.spectral_norm:.6g}{eig} -> {path}")
    return EXIT_OK


def _load_graph(args, cfg: RunConfig, data) -> ItemGraph:
    g = ItemGraph.load(_graph_path(args, cfg))
    if g.n_items != data.n_items:
        raise ValueError(f"graph has {g.n_items} items but the data has {data.n_items}")
    return g


def _model_path(args, cfg: RunConfig) -> Path:
    return Path(getattr(args, "checkpoint", None) or Path(cfg.artifact_dir) / "model.bin")


def cmd_train(args, cfg: RunConfig) -> int:
    data = InteractionDataset.load(cfg.data_dir)
    g = _load_graph(args, cfg, data)
    if g.config != cfg.train.graph_config():
        raise ValueError(f"graph was built with {g.config}, config asks for {cfg.train.graph_config()}")
    log_path = Path(cfg.artifact_dir) / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    res = fit(data, g, cfg.train, log_path=log_path, checkpoint_path=_model_path(args, cfg))
    print(f"best epoch {res.best_epoch}, val recall@20 {res.best_val:.4f} -> {_model_path(args, cfg)}")
    return EXIT_OK


def _scorer(args, cfg: RunConfig, data):
    """Return ``users -> score block`` for the chosen model."""
    from giffcf.baselines import FilterSpec, build_filter

    if args.model == "giffcf":
        g = _load_graph(args, cfg, data)
        ckpt = load_model(_model_path(args, cfg))
        if ckpt.params.config.n_items != data.n_items:
            raise ValueError("checkpoint does not match the dataset")
        sched = cfg.train.schedule()
        return lambda users: infer(ckpt.params, g, sched, data.rows(users))
    t = cfg.train
    if args.model == "linkprop":
        spec = FilterSpec("linkprop", t.beta, t.gamma, t.delta)
    elif args.model == "gfcf":
        spec = FilterSpec.gfcf(d=t.d, omega=cfg.gfcf_omega)
    else:
        spec = FilterSpec("giffcf_adjacency", t.beta, t.gamma, t.delta, t.d, t.omega)
    graph = None
    gpath = _graph_path(args, cfg)
    if args.model == "giffcf-filter" and gpath.exists():
        graph = _load_graph(args, cfg, data)
    f = build_filter(spec, data, seed=cfg.seed, graph=graph)
    return lambda users: f(data.rows(users))


def cmd_eval(args, cfg: RunConfig) -> int:
    from giffcf.metrics import evaluate

    data = InteractionDataset.load(cfg.data_dir)
    cutoffs = tuple(int(k) for k in args.k.split(","))
    if not cutoffs or min(cutoffs) < 1:
        raise ValueError("cutoffs must be positive")
    rep = evaluate(_scorer(args, cfg, data), data, args.split, cutoffs, mask_val=cfg.mask_val)
    out = Path(args.out or Path(cfg.artifact_dir) / f"eval_{args.model}_{args.split}.csv")
    rep.to_csv(out)
    print(f"{args.model} {args.split} ({rep.n_users} users): {rep.summary()}")
    print(f"-> {out}")
    return EXIT_OK


def cmd_recommend(args, cfg: RunConfig) -> int:
    data = InteractionDataset.load(cfg.data_dir)
    try:
        u = data.user_ids.index(str(args.user))
    except ValueError:
        raise ValueError(f"unknown user {args.user!r}") from None
    if args.k < 1:
        raise ValueError("k must be at least 1")
    scores = _scorer(args, cfg, data)(np.array([u]))[0]
    top = recommend_topk(scores, data.history(u), args.k)
    if top.truncated:
        print(f"warning: only {len(top.items)} unseen items available", file=sys.stderr)
    for rank, (item, score) in enumerate(zip(top.items, top.scores), start=1):
        print(f"{args.user}\t{data.item_ids[item]}\t{rank}\t{score:.6g}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "fetch-ml1m": cmd_fetch_ml1m,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads (default: $GIFFCF_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("configuration overrides")
    for key in _config_keys():
        flag = "--" + key.replace("_", "-")
        aliases = [flag] if flag == "--" + key else [flag, "--" + key]
        keys.add_argument(*aliases, dest=f"cfg_{key}", default=None, metavar="VALUE")

    p = argparse.ArgumentParser(prog="giffcf", description="Graph signal diffusion for collaborative filtering.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", parents=[common], help="split an interaction file")
    sp.add_argument("--input", required=True, help="user<TAB>item[<TAB>...] lines")
    sp.add_argument("--out", help="output directory (default: data_dir)")

    sp = sub.add_parser("fetch-ml1m", parents=[common], help="download and filter MovieLens-1M")
    sp.add_argument("--out", required=True, help="output interaction file")
    sp.add_argument("--cache", help="download cache directory")

    sp = sub.add_parser("build-graph", parents=[common], help="similarity, norm and eigenpairs")
    sp.add_argument("--graph", help="output file (default: artifact_dir/graph.bin)")

    sp = sub.add_parser("train", parents=[common], help="train the denoiser")
    sp.add_argument("--graph")
    sp.add_argument("--checkpoint", help="output model (default: artifact_dir/model.bin)")

    for name, helptext in (("eval", "evaluate a model"), ("recommend", "top-k for one user")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--model", choices=MODELS, default="giffcf")
        sp.add_argument("--graph")
        sp.add_argument("--checkpoint")
        if name == "eval":
            sp.add_argument("--split", choices=("val", "test"), default="test")
            sp.add_argument("--k", default="10,20", help="comma-separated cutoffs")
            sp.add_argument("--out", help="report CSV (default: artifact_dir/eval_<model>_<split>.csv)")
        else:
            sp.add_argument("--user", required=True, help="user id as in the input file")
            sp.add_argument("--k", type=int, default=10)
    return p


def _thread_limit(n):
    if n is None:
        env = os.environ.get("GIFFCF_THREADS")
        n = int(env) if env else None
    if n is None:
        return nullcontext()
    if n < 1:
        raise ValueError("threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        echo_config(cfg, args.command)
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args, cfg)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        name = f" {exc.filename}" if getattr(exc, "filename", None) else ""
        print(f"error:{name} {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, EigenSolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
