"""Command-line entry point.

Every subcommand resolves its settings in the order profile defaults, then
``--config`` file, then explicit flags, and writes the result next to its
outputs (``resolved.cfg`` for training runs).  Feeding that file back through
``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, apply_config, config_dict, dump_config, read_config
from .data import (DEFAULT_BRANCHES, BpeModel, EncodedCorpora, LanguageBranchMap, SyntheticCorpus, SyntheticSpec,
                   Vocabulary, gen_synthetic_corpus, prepare_corpora, read_lines, write_lines)
from .evaluation import (ReportStore, compare_runs, evaluate_direction, model_translator, read_report_csv,
                         zero_shot_matrix)
from .model import CheckpointError
from .trainer import (TrainConfig, branch_languages, finetune_pair, load_checkpoint, pretrain_mlm, save_checkpoint,
                      train_lbunmt, train_munmt, train_unmt_pair, trained_directions)

log = logging.getLogger("munmt")

TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


class CliError(Exception):
    """A user-facing failure; the message is printed as one line."""


# ---------------------------------------------------------------------------
# prepared data directory


class Workspace:
    """A prepared data directory: BPE codes, vocabulary, id corpora and test text."""

    def __init__(self, path):
        self.path = Path(path)
        meta_path = self.path / "data.cfg"
        if not meta_path.exists():
            raise CliError(f"{self.path} is not a prepared data directory (no data.cfg); run prepare-data first")
        meta = read_config(meta_path)
        self.languages = [x for x in meta.get("languages", "").split(",") if x]
        self.branches = dict(kv.split(":", 1) for kv in meta.get("branches", "").split(",") if kv)
        self.bpe = BpeModel.load(self.path / "bpe.codes")
        self.vocab = Vocabulary.load(self.path / "vocab.txt", self.languages)
        self.lang_ids = {lang: i for i, lang in enumerate(self.languages)}
        self._train: dict[str, list[list[int]]] | None = None

    @property
    def train(self) -> dict[str, list[list[int]]]:
        if self._train is None:
            self._train = {lang: [[int(t) for t in line.split()] for line in read_lines(self.path / f"train.{lang}.ids")]
                           for lang in self.languages}
        return self._train

    @property
    def codec(self) -> EncodedCorpora:
        return EncodedCorpora(self.bpe, self.vocab, {})

    def test_pair(self, src: str, tgt: str) -> tuple[list[str], list[str]]:
        missing = [lang for lang in (src, tgt) if not (self.path / f"test.{lang}").exists()]
        if missing:
            raise CliError(f"no test set for pair {src}-{tgt} (missing test.{missing[0]} in {self.path})")
        return read_lines(self.path / f"test.{src}"), read_lines(self.path / f"test.{tgt}")

    def test_sets(self) -> dict[str, list[str]]:
        return {lang: read_lines(self.path / f"test.{lang}") for lang in self.languages
                if (self.path / f"test.{lang}").exists()}

    def branch_map(self) -> LanguageBranchMap:
        if self.branches:
            return LanguageBranchMap.from_branches(self.branches)
        return LanguageBranchMap(dict(DEFAULT_BRANCHES)).restrict(self.languages)

    def check_languages(self, langs) -> None:
        unknown = [lang for lang in langs if lang not in self.lang_ids]
        if unknown:
            raise CliError(f"unknown language(s) {unknown}; the data directory has {self.languages}")


# ---------------------------------------------------------------------------
# settings

INTERNAL = {"command", "func", "config", "profile", "verbose", "_defaults", "_required"}


def _parse_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return list(text)
    return [x.strip() for x in (text or "").split(",") if x.strip()]


def _parse_pair(text: str) -> tuple[str, str]:
    parts = text.split("-")
    if len(parts) != 2 or not all(parts):
        raise CliError(f"expected a language pair like base-c1, got {text!r}")
    return parts[0], parts[1]


def resolve(args: argparse.Namespace, known_keys: set[str]) -> tuple[dict, TrainConfig]:
    """Merge profile, config file and flags into (command options, TrainConfig)."""
    file_values: dict[str, str] = read_config(args.config) if args.config else {}
    unknown = sorted(k for k in file_values if k not in TRAIN_FIELDS and k not in known_keys and k != "command")
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    profile = args.profile or file_values.get("profile") or "desk"
    tcfg = TrainConfig.for_profile(profile)
    tcfg = apply_config(tcfg, {k: v for k, v in file_values.items() if k in TRAIN_FIELDS and k != "profile"})
    options: dict = {}
    for key, value in vars(args).items():
        if key in INTERNAL:
            continue
        if value is None and key in file_values:
            value = file_values[key]
        if value is None:
            value = args._defaults.get(key)
        options[key] = value
        if key in TRAIN_FIELDS and getattr(args, key) is not None:
            setattr(tcfg, key, _parse_list(value) if key == "languages" else value)
    if (getattr(args, "beam_size", None) or 1) > 1:
        tcfg.strategy = "beam"
    tcfg.profile = profile
    return options, tcfg


def write_resolved(out_dir: Path, command: str, options: dict, tcfg: TrainConfig | None,
                   name: str = "resolved.cfg") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    values: dict = {"command": command}
    values.update({k: v for k, v in options.items() if v is not None and k not in TRAIN_FIELDS})
    if tcfg is not None:
        values.update(config_dict(tcfg))
    (out_dir / name).write_text(dump_config(values), encoding="utf-8")


def _langs(opts, tcfg, fallback) -> list[str]:
    return _parse_list(opts.get("languages")) or list(tcfg.languages) or list(fallback)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(opts, tcfg):
    spec = SyntheticSpec.from_file(opts["spec"]) if opts.get("spec") else SyntheticSpec()
    if opts.get("n_sentences") is not None:
        spec.n_sentences = int(opts["n_sentences"])
    if opts.get("scale"):
        for item in _parse_list(opts["scale"]):
            lang, frac = item.split(":")
            spec.corpus_scale[lang] = float(frac)
    if opts.get("seed") is not None:
        spec.seed = int(opts["seed"])
    sc = gen_synthetic_corpus(spec)
    out = Path(opts["out"])
    sc.save(out)
    write_resolved(out, "gen-synthetic", opts, tcfg)
    print(f"wrote {len(sc.languages)} languages to {out} (fingerprint {sc.fingerprint()[:12]})")


def cmd_prepare_data(opts, tcfg):
    src = Path(opts["corpus"])
    if (src / "synthetic.cfg").exists():
        sc = SyntheticCorpus.load(src)
        languages, branches = sc.languages, dict(sc.spec.branches)
    else:
        languages = _langs(opts, tcfg, []) or sorted(p.name[6:] for p in src.glob("train.*"))
        branches = dict(kv.split(":") for kv in _parse_list(opts.get("branches")))
    if not languages:
        raise CliError(f"no train.<lang> files in {src}")
    corpora = {}
    for lang in languages:
        path = src / f"train.{lang}"
        if not path.exists():
            raise CliError(f"missing corpus {path}")
        corpora[lang] = read_lines(path)
    enc = prepare_corpora(corpora, tcfg.vocab_size, tcfg.max_words)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    enc.bpe.save(out / "bpe.codes")
    enc.vocab.save(out / "vocab.txt")
    for lang, seqs in enc.train.items():
        write_lines(out / f"train.{lang}.ids", [" ".join(map(str, s)) for s in seqs])
        test = src / f"test.{lang}"
        if test.exists():
            write_lines(out / f"test.{lang}", read_lines(test))
    meta = {"languages": languages, "branches": branches}
    (out / "data.cfg").write_text(dump_config(meta), encoding="utf-8")
    write_resolved(out, "prepare-data", opts, tcfg)
    print(f"vocabulary {len(enc.vocab)} tokens; {sum(len(v) for v in enc.train.values())} sentences in {out}")


def _finish_run(out: Path, command: str, opts, tcfg, params, manifest, state=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    save_checkpoint(params, state, ckpt)
    manifest.checkpoints.append(str(ckpt))
    manifest.write(out / "manifest.tsv")
    write_resolved(out, command, opts, tcfg)
    print(f"{manifest.kind}: {manifest.count()} loss records, checkpoint {ckpt}")


def _load_model(path):
    try:
        params, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"no such checkpoint: {path}") from None
    return params


def _init_model(ws: Workspace, opts, tcfg):
    if opts.get("init"):
        return _load_model(opts["init"])
    log.info("no --init given; pretraining the encoder for %d steps", tcfg.lm_steps)
    lm_cfg = TrainConfig(**{f.name: getattr(tcfg, f.name) for f in fields(TrainConfig)})
    lm_cfg.languages = list(ws.languages)
    lm, _ = pretrain_mlm(ws.train, lm_cfg, len(ws.vocab), ws.lang_ids)
    return lm


def cmd_train_lm(opts, tcfg):
    ws = Workspace(opts["data"])
    tcfg.languages = _langs(opts, tcfg, ws.languages)
    ws.check_languages(tcfg.languages)
    lm_cfg = TrainConfig(**{f.name: getattr(tcfg, f.name) for f in fields(TrainConfig)})
    params, man = pretrain_mlm(ws.train, lm_cfg, len(ws.vocab), ws.lang_ids, steps=tcfg.lm_steps)
    _finish_run(Path(opts["out"]), "train-lm", opts, tcfg, params, man)


def cmd_train_sm(opts, tcfg):
    ws = Workspace(opts["data"])
    pair = list(_parse_pair(opts["pair"]))
    ws.check_languages(pair)
    tcfg.languages = pair
    params, man = train_unmt_pair(ws.train, _init_model(ws, opts, tcfg), tcfg.steps, tcfg, pair, ws.lang_ids)
    _finish_run(Path(opts["out"]), "train-sm", opts, tcfg, params, man)


def cmd_train_lbunmt(opts, tcfg):
    ws = Workspace(opts["data"])
    langs = _langs(opts, tcfg, ws.languages)
    ws.check_languages(langs)
    bm = ws.branch_map()
    members = branch_languages(langs, bm, opts["branch"])
    tcfg.languages = members
    params, man = train_lbunmt(ws.train, _init_model(ws, opts, tcfg), tcfg.steps, tcfg, members, bm, ws.lang_ids)
    _finish_run(Path(opts["out"]), "train-lbunmt", opts, tcfg, params, man)


def _teachers(spec: str | None) -> dict:
    out = {}
    for item in _parse_list(spec):
        if "=" not in item:
            raise CliError(f"expected BRANCH=PATH in --teachers, got {item!r}")
        branch, path = item.split("=", 1)
        out[branch] = _load_model(path).frozen()
    return out


def cmd_train_munmt(opts, tcfg):
    ws = Workspace(opts["data"])
    langs = _langs(opts, tcfg, ws.languages)
    ws.check_languages(langs)
    tcfg.languages = langs
    tcfg.branches = {lang: ws.branch_map().branch(lang) for lang in langs}
    teachers = _teachers(opts.get("teachers"))
    params, man = train_munmt(ws.train, _init_model(ws, opts, tcfg), tcfg.steps, tcfg, teachers, langs, ws.lang_ids)
    _finish_run(Path(opts["out"]), "train-munmt", opts, tcfg, params, man)


def cmd_finetune(opts, tcfg):
    ws = Workspace(opts["data"])
    pair = _parse_pair(opts["pair"])
    ws.check_languages(pair)
    tcfg.languages = list(pair)
    params, man = finetune_pair(_load_model(opts["model"]), ws.train, pair, tcfg.steps, tcfg, ws.lang_ids)
    _finish_run(Path(opts["out"]), "finetune", opts, tcfg, params, man)


def cmd_translate(opts, tcfg):
    ws = Workspace(opts["data"])
    src, tgt = opts["src"], opts["tgt"]
    ws.check_languages([src, tgt])
    lines = read_lines(opts["input"]) if opts.get("input") else [x.rstrip("\n") for x in sys.stdin]
    out = model_translator(_load_model(opts["model"]), ws.codec, ws.lang_ids, tcfg.decode())(lines, src, tgt)
    if opts.get("output"):
        write_lines(opts["output"], out)
    else:
        for line in out:
            print(line)


def _report_dir(opts) -> Path:
    return Path(opts.get("out") or Path(opts["model"]).parent)


def cmd_evaluate(opts, tcfg):
    ws = Workspace(opts["data"])
    if opts.get("pair"):
        pairs = [_parse_pair(p) for p in _parse_list(opts["pair"])]
    else:
        langs = _langs(opts, tcfg, ws.languages)
        pairs = trained_directions(langs)
    ws.check_languages({lang for p in pairs for lang in p})
    test_sets = {p: ws.test_pair(*p) for p in pairs}
    params = _load_model(opts["model"])
    store = ReportStore()
    run_id = opts.get("run_id") or Path(opts["model"]).parent.name
    for (s, t), test in test_sets.items():
        rep = evaluate_direction(params, test, s, t, tcfg.decode(), codec=ws.codec, lang_ids=ws.lang_ids,
                                 store=store, run_id=run_id)
        print(f"{s}-{t}\t{rep}")
    out = _report_dir(opts)
    store.write(run_id, out / "report.csv")
    write_resolved(out, "evaluate", opts, tcfg, "evaluate.cfg")


def cmd_zero_shot(opts, tcfg):
    ws = Workspace(opts["data"])
    langs = _parse_list(opts.get("languages")) or list(ws.languages[1:])
    ws.check_languages(langs)
    store = ReportStore()
    run_id = opts.get("run_id") or Path(opts["model"]).parent.name
    m = zero_shot_matrix(_load_model(opts["model"]), ws.test_sets(), langs, tcfg.decode(), codec=ws.codec,
                         lang_ids=ws.lang_ids, store=store, run_id=run_id)
    print(m.to_text())
    print(f"mean {m.mean():.2f}")
    out = _report_dir(opts)
    store.write(run_id, out / "zero_shot.csv")
    write_resolved(out, "zero-shot", opts, tcfg, "zero_shot.cfg")


def cmd_compare(opts, tcfg):
    runs = {}
    for item in opts["runs"]:
        path = Path(item)
        csv = path / "report.csv" if path.is_dir() else path
        if not csv.exists():
            raise CliError(f"no report for run {item} (expected {csv})")
        runs[path.name if path.is_dir() else path.stem] = read_report_csv(csv)
    cmp = compare_runs(runs)
    print(cmp.to_text())
    if opts.get("csv"):
        Path(opts["csv"]).write_text(cmp.to_csv(), encoding="utf-8")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--profile", choices=["desk", "paper"], default=None, help="size profile (default desk)")
    common.add_argument("--config", default=None, help="key = value file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(prog="munmt", description="Multilingual unsupervised NMT at desk scale.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    required = {'train-sm': ['pair'], 'train-lbunmt': ['branch'], 'finetune': ['model', 'pair'], 'translate': ['model', 'src', 'tgt'], 'evaluate': ['model'], 'zero-shot': ['model']}

    def add(name, func, help_text, **defaults):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=func, _defaults=defaults, _required=required.get(name, []))
        return p

    p = add("gen-synthetic", cmd_gen_synthetic, "write synthetic cipher-language corpora", out="synthetic")
    p.add_argument("--out")
    p.add_argument("--spec", help="synthetic spec file")
    p.add_argument("--n-sentences", dest="n_sentences", type=int)
    p.add_argument("--scale", help="per-language corpus fractions, e.g. c3:0.05")

    p = add("prepare-data", cmd_prepare_data, "learn BPE and encode corpora", corpus="synthetic", out="data")
    p.add_argument("--corpus", help="directory with train.<lang> (and test.<lang>) files")
    p.add_argument("--out")
    p.add_argument("--languages")
    p.add_argument("--branches", help="lang:branch pairs when the corpus has no synthetic.cfg")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)

    p = add("train-lm", cmd_train_lm, "masked-LM pretraining", data="data", out="runs/lm")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--languages")
    p.add_argument("--steps", dest="lm_steps", type=int)

    p = add("train-sm", cmd_train_sm, "bilingual UNMT baseline", data="data", out="runs/sm")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--init", help="pretrained checkpoint (pretrains one if omitted)")
    p.add_argument("--pair")
    p.add_argument("--steps", type=int)

    p = add("train-lbunmt", cmd_train_lbunmt, "branch teacher", data="data", out="runs/lbunmt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--init")
    p.add_argument("--branch")
    p.add_argument("--languages")
    p.add_argument("--steps", type=int)

    p = add("train-munmt", cmd_train_munmt, "multilingual UNMT with optional distillation", data="data",
            out="runs/munmt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--init")
    p.add_argument("--languages")
    p.add_argument("--kd", dest="kd_mode", choices=["none", "skd", "lbkd"])
    p.add_argument("--teachers", help="BRANCH=CHECKPOINT pairs for LBKD")
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--steps", type=int)

    p = add("finetune", cmd_finetune, "continue training on one pivot pair", data="data", out="runs/ft")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--model")
    p.add_argument("--pair")
    p.add_argument("--steps", type=int)

    p = add("translate", cmd_translate, "translate lines", data="data")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--src")
    p.add_argument("--tgt")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--beam-size", dest="beam_size", type=int)

    p = add("evaluate", cmd_evaluate, "BLEU per direction", data="data")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--pair", help="comma separated pairs; default all trained directions")
    p.add_argument("--languages")
    p.add_argument("--out", help="report directory (default: the model's directory)")
    p.add_argument("--run-id", dest="run_id")

    p = add("zero-shot", cmd_zero_shot, "BLEU matrix over untrained directions", data="data")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--languages", help="default: every non-pivot language")
    p.add_argument("--out")
    p.add_argument("--run-id", dest="run_id")

    p = add("compare", cmd_compare, "side-by-side BLEU table of runs")
    p.add_argument("runs", nargs="+", help="run directories or report CSV files")
    p.add_argument("--csv", help="also write the table as CSV")
    return parser


def _known_keys(parser: argparse.ArgumentParser) -> set[str]:
    keys = set()
    for action in parser._subparsers._group_actions[0].choices.values():
        keys.update(a.dest for a in action._actions if a.dest != "help")
    return keys - INTERNAL


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        opts, tcfg = resolve(args, _known_keys(parser))
    except (ConfigError, OSError) as exc:
        print(f"munmt: error: {exc}", file=sys.stderr)
        return 1
    missing = [k for k in args._required if opts.get(k) in (None, "")]
    if missing:
        parser.error(f"{args.command} needs {', '.join('--' + k.replace('_', '-') for k in missing)}")
    try:
        args.func(opts, tcfg)
    except (CliError, ConfigError, CheckpointError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"munmt: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
