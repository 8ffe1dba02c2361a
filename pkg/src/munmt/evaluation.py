"""Corpus BLEU, per-direction evaluation, the zero-shot matrix and run comparison."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .data.bpe import decode_ids
from .decoding import DecodeConfig, translate_lines
from .model import ModelParams


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    bp: float
    hyp_len: int
    ref_len: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)

    def __str__(self) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        return f"BLEU = {self.score:.2f}, {p} (BP={self.bp:.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"


def _tokens(line) -> list[str]:
    return line.split() if isinstance(line, str) else list(line)


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> BleuReport:
    """Case-sensitive corpus BLEU with clipped counts and no smoothing.

    Lines are whitespace-tokenized strings or token lists.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = ngram_counts(h, n)
            rc = ngram_counts(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1 - ref_len / hyp_len)
    if min(precisions) == 0:
        score = 0.0
    else:
        score = 100 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len, matches, totals)


# ---------------------------------------------------------------------------
# report store


REPORT_FIELDS = ["src", "tgt", "bleu", "p1", "p2", "p3", "p4", "bp", "kind"]


@dataclass
class ReportStore:
    """BLEU rows keyed by ``(run id, src, tgt)``."""

    rows: dict[tuple[str, str, str], tuple[BleuReport, str]] = field(default_factory=dict)

    def add(self, run_id: str, src: str, tgt: str, report: BleuReport, kind: str = "trained") -> None:
        self.rows[(run_id, src, tgt)] = (report, kind)

    def get(self, run_id: str, src: str, tgt: str) -> BleuReport:
        return self.rows[(run_id, src, tgt)][0]

    def runs(self) -> list[str]:
        return sorted({k[0] for k in self.rows})

    def to_csv(self, run_id: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for (rid, src, tgt), (rep, kind) in self.rows.items():
            if rid != run_id:
                continue
            p = list(rep.precisions) + [0.0] * (4 - len(rep.precisions))
            w.writerow([src, tgt, f"{rep.score:.4f}", *(f"{x:.6f}" for x in p[:4]), f"{rep.bp:.6f}", kind])
        return buf.getvalue()

    def write(self, run_id: str, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv(run_id), encoding="utf-8")


def read_report_csv(path) -> dict[tuple[str, str], float]:
    """Per-direction BLEU from a run report file."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["src"], r["tgt"]): float(r["bleu"]) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# evaluation


Translator = Callable[[list[str], str, str], list[str]]


def model_translator(params: ModelParams, codec, lang_ids: dict[str, int], cfg: DecodeConfig | None = None) -> Translator:
    """Wrap a model as a line translator; ``codec`` has ``encode(lines, lang)`` and ``vocab``."""

    def run(lines, src, tgt):
        ids = codec.encode(lines, src)
        out = translate_lines(params, ids, lang_ids[src], lang_ids[tgt], cfg)
        return [decode_ids(o, codec.vocab) for o in out]

    return run


def evaluate_direction(model, test_set: tuple[Sequence[str], Sequence[str]], src_lang: str, tgt_lang: str,
                       cfg: DecodeConfig | None = None, *, codec=None, lang_ids=None, store: ReportStore | None = None,
                       run_id: str = "", kind: str = "trained") -> BleuReport:
    """Translate the source side of ``test_set`` and score it against the reference side.

    ``model`` is either :class:`ModelParams` (then ``codec`` and ``lang_ids``
    are required) or any callable ``(lines, src, tgt) -> lines``.
    """
    sources, refs = test_set
    if len(sources) == 0:
        raise ValueError(f"empty test set for {src_lang}-{tgt_lang}")
    if isinstance(model, ModelParams):
        if codec is None or lang_ids is None:
            raise ValueError("model evaluation needs a codec and language ids")
        model = model_translator(model, codec, lang_ids, cfg)
    hyps = model(list(sources), src_lang, tgt_lang)
    report = bleu(hyps, list(refs))
    if store is not None:
        store.add(run_id, src_lang, tgt_lang, report, kind)
    return report


@dataclass
class ZeroShotMatrix:
    languages: list[str]
    cells: dict[tuple[str, str], BleuReport | None]

    def score(self, src: str, tgt: str) -> float | None:
        rep = self.cells.get((src, tgt))
        return None if rep is None else rep.score

    def mean(self) -> float:
        vals = [r.score for r in self.cells.values() if r is not None]
        return sum(vals) / len(vals) if vals else float("nan")

    def to_text(self) -> str:
        w = max(6, *(len(x) for x in self.languages))
        lines = [" " * w + "".join(f"{t:>{w + 2}}" for t in self.languages)]
        for s in self.languages:
            row = f"{s:<{w}}"
            for t in self.languages:
                v = None if s == t else self.score(s, t)
                row += f"{'-' if v is None else f'{v:.2f}':>{w + 2}}"
            lines.append(row)
        return "\n".join(lines)


def zero_shot_matrix(model, test_sets: dict[str, Sequence[str]], languages: Sequence[str],
                     cfg: DecodeConfig | None = None, *, codec=None, lang_ids=None,
                     store: ReportStore | None = None, run_id: str = "") -> ZeroShotMatrix:
    """Score every ordered pair of distinct ``languages``.

    ``test_sets`` maps a language to its side of the shared parallel test
    pool; a pair with either side missing is recorded as absent.
    """
    cells: dict[tuple[str, str], BleuReport | None] = {}
    for s in languages:
        for t in languages:
            if s == t:
                continue
            if s not in test_sets or t not in test_sets:
                cells[(s, t)] = None
                continue
            cells[(s, t)] = evaluate_direction(model, (test_sets[s], test_sets[t]), s, t, cfg, codec=codec,
                                               lang_ids=lang_ids, store=store, run_id=run_id, kind="zero-shot")
    return ZeroShotMatrix(list(languages), cells)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    runs: list[str]
    directions: list[tuple[str, str]]
    table: dict[tuple[str, str], dict[str, float | None]]

    def average(self, run: str) -> float | None:
        vals = [self.table[d][run] for d in self.directions if self.table[d].get(run) is not None]
        return sum(vals) / len(vals) if vals else None

    def to_text(self) -> str:
        w = max(8, *(len(r) for r in self.runs))
        head = f"{'direction':<12}" + "".join(f"{r:>{w + 2}}" for r in self.runs)
        lines = [head]

        def fmt(v):
            return "-" if v is None else f"{v:.2f}"

        for d in self.directions:
            lines.append(f"{d[0] + '-' + d[1]:<12}" + "".join(f"{fmt(self.table[d].get(r)):>{w + 2}}" for r in self.runs))
        lines.append(f"{'Average':<12}" + "".join(f"{fmt(self.average(r)):>{w + 2}}" for r in self.runs))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["src", "tgt", *self.runs])
        for d in self.directions:
            w.writerow([*d, *("" if self.table[d].get(r) is None else f"{self.table[d][r]:.4f}" for r in self.runs)])
        w.writerow(["Average", "", *("" if self.average(r) is None else f"{self.average(r):.4f}" for r in self.runs)])
        return buf.getvalue()


def compare_runs(runs: dict[str, dict[tuple[str, str], float]]) -> Comparison:
    """Align per-direction BLEU of several runs; averages are unweighted over present directions."""
    if not runs:
        raise ValueError("need at least one run")
    directions: list[tuple[str, str]] = []
    for scores in runs.values():
        for d in scores:
            if d not in directions:
                directions.append(d)
    table = {d: {r: runs[r].get(d) for r in runs} for d in directions}
    return Comparison(list(runs), directions, table)


def load_comparison_csv(text: str) -> Comparison:
    rows = list(csv.reader(io.StringIO(text)))
    runs = rows[0][2:]
    scores: dict[str, dict[tuple[str, str], float]] = {r: {} for r in runs}
    for row in rows[1:]:
        if row[0] == "Average":
            continue
        for r, v in zip(runs, row[2:]):
            if v != "":
                scores[r][(row[0], row[1])] = float(v)
    directions = [(row[0], row[1]) for row in rows[1:] if row[0] != "Average"]
    return Comparison(runs, directions, {d: {r: scores[r].get(d) for r in runs} for d in directions})
