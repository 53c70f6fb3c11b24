"""
``reroute`` command line.

Subcommands: gen-corpus, pretrain, generate, reroute, ablate, analyze,
eval-shift. Every run writes its effective config to ``<out>/run_config.cfg``
before computing anything, and a ``manifest.json`` with SHA-256 checksums of
inputs and outputs at the end. Re-running with ``--config <out>/run_config.cfg``
reproduces the outputs byte for byte.

Exit codes: 0 ok, 1 internal error, 2 malformed config or usage, 3 missing
input file, 4 prompt outside the vocabulary, 5 corrupt checkpoint. Failures
print one JSON error record on stderr (and to ``<out>/error.json``).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from reroute import analysis
from reroute.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from reroute.config import ConfigFileError, build, dump_kv, parse_kv
from reroute.model import generate
from reroute.rerouter import ConfigError, SessionConfig, SessionLog, baseline_log, run_session
from reroute.tasks.corpus import DEFAULT_SPECS, gen_corpus, read_corpus, write_corpus
from reroute.tasks.evaluate import eval_shift_suite
from reroute.tasks.pretrain import Recipe, pretrain_toy
from reroute.tasks.tokenizer import EOS_ID, EncodingError, detokenize, tokenize

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_ALPHABET, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

ABLATION_STRATEGIES = ("hard", "soft", "random", "reverse", "last_k", "all", "none")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


@dataclass
class RunConfig:
    command: str = ""
    model: str = ""
    prompt: str = ""
    prompt_file: str = ""
    out: str = "run"
    seed: int = 0
    # session
    opt_steps: int = 5
    regen_interval: int = 32
    lr: float = 0.05
    weight_decay: float = 1e-8
    epsilon: float = 1e-5
    strategy: str = "soft"
    ratio: float = 0.5
    max_new_tokens: int = 64
    temperature: float = 0.0
    continuous: bool = True
    confidence_sign: str = "as_written"
    soft_scaling: str = "lr"
    # corpus / pretraining / evaluation
    size: int = 20000
    corpus: str = ""
    recipe: str = ""
    baseline_dir: str = ""
    rerouted_dir: str = ""
    n_per_domain: int = 20
    n_shots: int = 5

    def session(self, prompt_index: int = 0, **overrides) -> SessionConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(SessionConfig)
              if hasattr(self, f.name)}
        kw.update(rng_seed=self.seed + prompt_index, eos_token=EOS_ID)
        kw.update(overrides)
        return SessionConfig(**kw)


FLAG_FIELDS = {
    "model": "model", "prompt": "prompt", "prompt_file": "prompt_file", "steps": "opt_steps",
    "interval": "regen_interval", "strategy": "strategy", "ratio": "ratio", "seed": "seed", "out": "out",
    "max_new_tokens": "max_new_tokens", "temperature": "temperature", "confidence_sign": "confidence_sign",
    "size": "size", "corpus": "corpus", "recipe": "recipe", "baseline": "baseline_dir",
    "rerouted": "rerouted_dir", "n_per_domain": "n_per_domain", "n_shots": "n_shots",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", help="checkpoint path")
    prompts = argparse.ArgumentParser(add_help=False)
    g = prompts.add_mutually_exclusive_group()
    g.add_argument("--prompt")
    g.add_argument("--prompt-file", help="one prompt per line; optional TAB + expected answer")
    sess = argparse.ArgumentParser(add_help=False)
    sess.add_argument("--steps", type=int, help="optimization steps per phase")
    sess.add_argument("--interval", type=int, help="tokens generated between phases")
    sess.add_argument("--strategy", help="hard, soft, random, reverse, last_k, all")
    sess.add_argument("--ratio", type=float, help="fraction of layers for hard-family strategies")
    sess.add_argument("--max-new-tokens", type=int)
    sess.add_argument("--temperature", type=float)
    sess.add_argument("--confidence-sign", choices=("as_written", "negated"))

    p = argparse.ArgumentParser(prog="reroute", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus")
    c.add_argument("--size", type=int)
    c = sub.add_parser("pretrain", parents=[common], help="train the toy MoE model")
    c.add_argument("--recipe", help="recipe file (default: bundled pretrain_default.cfg)")
    c.add_argument("--corpus", help="corpus file (default: generated from the recipe)")
    sub.add_parser("generate", parents=[common, model, prompts, sess], help="baseline decoding")
    sub.add_parser("reroute", parents=[common, model, prompts, sess], help="decoding with test-time rerouting")
    sub.add_parser("ablate", parents=[common, model, prompts, sess], help="strategy x continuity sweep")
    c = sub.add_parser("analyze", parents=[common], help="edit distance / entropy / utilization export")
    c.add_argument("--baseline", required=False, help="directory of baseline session logs")
    c.add_argument("--rerouted", required=False, help="directory of rerouted session logs")
    c = sub.add_parser("eval-shift", parents=[common, model, sess], help="aligned vs shifted continuation suite")
    c.add_argument("--n-per-domain", type=int)
    c.add_argument("--n-shots", type=int)
    return p


def resolve_config(args) -> RunConfig:
    values: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError("missing_file", f"config file not found: {path}", EXIT_MISSING)
        try:
            values = parse_kv(path.read_text(encoding="utf-8"))
        except ConfigFileError as exc:
            raise CliError("malformed_config", str(exc), EXIT_CONFIG) from exc
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise CliError("malformed_config", f"unknown config keys: {unknown}", EXIT_CONFIG)
    try:
        cfg = build(RunConfig, values)
    except (ConfigFileError, TypeError, ValueError) as exc:
        raise CliError("malformed_config", str(exc), EXIT_CONFIG) from exc
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, name, v)
    cfg.command = args.command
    return cfg


# -- helpers --------------------------------------------------------------------------


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def threads() -> int:
    try:
        return max(1, int(os.environ.get("REROUTE_THREADS", "1")))
    except ValueError:
        return 1


def fan_out(fn, items):
    """Order-preserving map, parallel up to REROUTE_THREADS."""
    n = threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


def load_model(cfg: RunConfig):
    if not cfg.model:
        raise CliError("missing_checkpoint", "--model is required", EXIT_MISSING)
    path = Path(cfg.model)
    if not path.is_file():
        raise CliError("missing_checkpoint", f"checkpoint not found: {path}", EXIT_MISSING)
    try:
        return load_checkpoint(path), [path]
    except CheckpointError as exc:
        raise CliError("corrupt_checkpoint", f"{type(exc).__name__}: {exc}", EXIT_CHECKPOINT) from exc


def load_prompts(cfg: RunConfig) -> tuple[list[tuple[str, str | None]], list[Path]]:
    """Prompt texts with optional expected answers."""
    if cfg.prompt_file:
        path = Path(cfg.prompt_file)
        if not path.is_file():
            raise CliError("missing_file", f"prompt file not found: {path}", EXIT_MISSING)
        out = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            text, _, answer = line.partition("\t")
            out.append((text, answer or None))
        inputs = [path]
    elif cfg.prompt:
        out, inputs = [(cfg.prompt, None)], []
    else:
        raise CliError("malformed_config", "one of --prompt / --prompt-file is required", EXIT_CONFIG)
    if not out:
        raise CliError("malformed_config", "no prompts given", EXIT_CONFIG)
    for text, _ in out:
        try:
            tokenize(text)
        except EncodingError as exc:
            raise CliError("out_of_alphabet", str(exc), EXIT_ALPHABET) from exc
    return out, inputs


def session_config(cfg: RunConfig, i: int = 0, **overrides) -> SessionConfig:
    try:
        return cfg.session(i, **overrides)
    except (ConfigError, TypeError) as exc:
        raise CliError("malformed_config", str(exc), EXIT_CONFIG) from exc


def write_manifest(out: Path, cfg: RunConfig, inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": cfg.command,
        "seed": cfg.seed,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p.relative_to(out)): sha256(p) for p in sorted(outputs)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def note(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- commands ---------------------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig, out: Path):
    items = gen_corpus(DEFAULT_SPECS, cfg.size, cfg.seed)
    path = out / "corpus.tsv"
    write_corpus(items, path)
    return [], [path]


def _recipe(cfg: RunConfig) -> tuple[Recipe, list[Path]]:
    if cfg.recipe:
        path = Path(cfg.recipe)
        if not path.is_file():
            raise CliError("missing_file", f"recipe not found: {path}", EXIT_MISSING)
        text, inputs = path.read_text(encoding="utf-8"), [path]
    else:
        text, inputs = resources.files("reroute").joinpath("recipes/pretrain_default.cfg").read_text(), []
    try:
        return Recipe.from_text(text), inputs
    except (ConfigFileError, ValueError, TypeError) as exc:
        raise CliError("malformed_config", f"recipe: {exc}", EXIT_CONFIG) from exc


def cmd_pretrain(cfg: RunConfig, out: Path):
    recipe, inputs = _recipe(cfg)
    (out / "recipe.cfg").write_text(
        dump_kv({f"model.{k}": v for k, v in recipe.model.to_dict().items()})
        + dump_kv({f"train.{k}": v for k, v in dataclasses.asdict(recipe.train).items()})
    )
    if cfg.corpus:
        path = Path(cfg.corpus)
        if not path.is_file():
            raise CliError("missing_file", f"corpus not found: {path}", EXIT_MISSING)
        items = read_corpus(path)
        inputs.append(path)
    else:
        items = gen_corpus(DEFAULT_SPECS, recipe.train.corpus_size, recipe.train.corpus_seed)
    start = time.time()
    model, history, health = pretrain_toy(
        recipe, items, progress=lambda s, ce, aux: note(f"step {s} ce {ce:.4f} aux {aux:.4f} ({time.time() - start:.0f}s)")
    )
    ckpt = out / "model.moer"
    save_checkpoint(model, ckpt)
    curve = out / "loss_curve.csv"
    curve.write_text("step,ce,aux\n" + "".join(f"{s},{ce!r},{aux!r}\n" for s, ce, aux in history))
    hp = out / "health.json"
    hp.write_text(json.dumps(health, indent=1, sort_keys=True) + "\n")
    return inputs, [out / "recipe.cfg", ckpt, curve, hp]


def _decode(model, cfg: RunConfig, prompts, rerouted: bool, **overrides):
    """Run one decoding per prompt; returns [(text, tokens, log)]."""
    def one(arg):
        i, (text, _) = arg
        sc = session_config(cfg, i, **overrides)
        ids = tokenize(text)
        if rerouted:
            toks, log = run_session(model, ids, sc)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(sc.rng_seed).spawn(2)[0])
            toks, trace = generate(model, ids, sc.max_new_tokens, sc.temperature, rng, eos=sc.eos_token)
            log = baseline_log(ids, toks, trace, sc, model.config.max_seq)
        return detokenize(toks), toks, log

    return fan_out(one, list(enumerate(prompts)))


def _write_sessions(out: Path, results, sub: str = "sessions") -> list[Path]:
    d = out / sub
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (_, _, log) in enumerate(results):
        p = d / f"{i:04d}.jsonl"
        log.write(p)
        paths.append(p)
    return paths


def cmd_decode(cfg: RunConfig, out: Path, rerouted: bool):
    model, inputs = load_model(cfg)
    prompts, more = load_prompts(cfg)
    session_config(cfg)
    results = _decode(model, cfg, prompts, rerouted)
    gen = out / "generations.txt"
    gen.write_text("".join(text + "\n" for text, _, _ in results), encoding="utf-8")
    return inputs + more, [gen] + _write_sessions(out, results)


def _mean_entropy(log: SessionLog) -> float:
    e = log.entropy_matrix()
    return float(analysis.block_entropy(e).mean()) if len(e) else float("nan")


def cmd_ablate(cfg: RunConfig, out: Path):
    model, inputs = load_model(cfg)
    prompts, more = load_prompts(cfg)
    session_config(cfg)
    baseline = _decode(model, cfg, prompts, rerouted=False)
    rows, outputs = [], []
    for strategy in ABLATION_STRATEGIES:
        for continuous in (True, False):
            over = {"continuous": continuous}
            if strategy == "none":
                over.update(opt_steps=0)
            else:
                over.update(strategy=strategy)
            results = _decode(model, cfg, prompts, rerouted=True, **over)
            tag = f"{strategy}_{'on' if continuous else 'off'}"
            outputs += _write_sessions(out, results, f"logs/{tag}")
            answered = [(r, a) for r, (_, a) in zip(results, prompts) if a is not None]
            rows.append({
                "strategy": strategy,
                "continuous": "on" if continuous else "off",
                "n_prompts": len(results),
                "mean_phases": float(np.mean([log.n_phases for _, _, log in results])),
                "mean_generated": float(np.mean([len(t) for _, t, _ in results])),
                "mean_entropy": float(np.mean([_mean_entropy(log) for _, _, log in results])),
                "answer_accuracy": float(np.mean([r[0].startswith(a) for r, a in answered])) if answered else "",
                "matches_baseline": float(np.mean([r[1] == b[1] for r, b in zip(results, baseline)])),
            })
    path = out / "ablation.csv"
    cols = list(rows[0])
    path.write_text(",".join(cols) + "\n" + "".join(",".join(_cell(r[c]) for c in cols) + "\n" for r in rows))
    outputs += _write_sessions(out, baseline, "logs/baseline")
    return inputs + more, [path] + outputs


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _selections(log: SessionLog) -> np.ndarray:
    paths = [analysis.parse_pathway(e["pathway"]) for e in log.of("token")]
    return np.array(paths, dtype=np.int64)


def cmd_analyze(cfg: RunConfig, out: Path):
    if not cfg.baseline_dir or not cfg.rerouted_dir:
        raise CliError("malformed_config", "--baseline and --rerouted log directories are required", EXIT_CONFIG)
    bdir, rdir = Path(cfg.baseline_dir), Path(cfg.rerouted_dir)
    for d in (bdir, rdir):
        if not d.is_dir():
            raise CliError("missing_file", f"log directory not found: {d}", EXIT_MISSING)
    names = sorted(p.name for p in bdir.glob("*.jsonl") if (rdir / p.name).is_file())
    if not names:
        raise CliError("missing_file", "no matching session logs in the two directories", EXIT_MISSING)
    inputs = [bdir / n for n in names] + [rdir / n for n in names]

    def one(name):
        b, r = SessionLog.read(bdir / name), SessionLog.read(rdir / name)
        return name, b, r, _selections(b), _selections(r)

    pairs = fan_out(one, names)
    edit_rows, ent_records, before_all, after_all = [], [], [], []
    for name, b, r, sb, sr in pairs:
        n = min(len(sb), len(sr))
        if n == 0:
            continue
        edit_rows.append(analysis.layerwise_edit_distance(sb[:n], sr[:n]))
        before_all.append(sb[:n])
        after_all.append(sr[:n])
        for kind, log in (("baseline", b), ("rerouted", r)):
            for i, v in enumerate(analysis.block_entropy(log.entropy_matrix())):
                ent_records.append({"session": name, "kind": kind, "block": i, "entropy": float(v)})
    if not edit_rows:
        raise CliError("missing_file", "session logs contain no generated tokens", EXIT_MISSING)
    n_experts = int(max(np.concatenate(before_all + after_all).max(), 0)) + 1
    meta = SessionLog.read(rdir / names[0]).of("session_start")
    ed = out / "layer_edit_distance.csv"
    ed.write_text("layer,mean_edit_distance\n" + "".join(
        f"{l},{v!r}\n" for l, v in enumerate(np.mean(edit_rows, axis=0))))
    ut = out / "utilization_shift.csv"
    before = analysis.utilization(np.concatenate(before_all), n_experts)
    after = analysis.utilization(np.concatenate(after_all), n_experts)
    ut.write_text(analysis.matrix_csv(analysis.utilization_shift(before, after), value="shift"))
    en = out / "entropy.jsonl"
    en.write_text(analysis.entropy_jsonl(ent_records))
    summary = out / "summary.json"
    summary.write_text(json.dumps({
        "sessions": len(edit_rows),
        "n_experts_seen": n_experts,
        "rerouted_config": meta[0]["config"] if meta else None,
        "mean_pathway_distance": float(np.mean([analysis.mean_pathway_distance(b, a) for b, a in zip(before_all, after_all)])),
    }, indent=1, sort_keys=True) + "\n")
    return inputs, [ed, ut, en, summary]


def cmd_eval_shift(cfg: RunConfig, out: Path):
    model, inputs = load_model(cfg)
    report = eval_shift_suite(model, session_config(cfg), n_per_domain=cfg.n_per_domain,
                              n_shots=cfg.n_shots, seed=cfg.seed, threads=threads())
    path = out / "eval_report.json"
    path.write_text(report.to_json() + "\n")
    return inputs, [path]


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "generate": lambda c, o: cmd_decode(c, o, rerouted=False),
    "reroute": lambda c, o: cmd_decode(c, o, rerouted=True),
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "eval-shift": cmd_eval_shift,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        (out / "run_config.cfg").write_text(dump_kv(dataclasses.asdict(cfg)), encoding="utf-8")
        inputs, outputs = COMMANDS[cfg.command](cfg, out)
        write_manifest(out, cfg, inputs, [out / "run_config.cfg"] + outputs)
        return EXIT_OK
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code, out)
    except Exception as exc:  # noqa: BLE001 - surfaced as a machine-readable record
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL, out)


def _fail(kind: str, message: str, code: int, out: Path | None) -> int:
    record = json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True)
    print(record, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(record + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
