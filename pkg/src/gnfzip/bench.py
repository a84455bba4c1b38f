"""Benchmark harness: real archives, wall-clock timings, ablation grids.

Every bpb in a report is ``archive bytes * 8 / bases`` of a file actually
written to disk and read back.
"""
from __future__ import annotations

import json
import os
import shutil
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import OrderKEntropyModel, UniformModel
from .entropy import EntropyModel
from .errors import ConfigError
from .geneformer import GeneformerEntropyModel, GeneformerModel, ModelConfig
from .grouping import DEFAULT_GROUP_LEN, GroupingConfig, fit_context
from .pipeline import N_SIDE, Archive, compress, decompress
from .sequence_io import parse_fasta, split_dataset, write_fasta
from .trainer import TrainConfig, train

EXTERNAL_TOOLS = {
    "gzip": (["gzip", "-9", "-c"], ["gzip", "-d", "-c"]),
    "bzip2": (["bzip2", "-9", "-c"], ["bzip2", "-d", "-c"]),
    "xz": (["xz", "-9", "-c"], ["xz", "-d", "-c"]),
}


@dataclass
class BenchRow:
    method: str
    bpb: float | None
    encode_s: float | None
    decode_s: float | None
    params: int | None = None
    config: dict = field(default_factory=dict)
    note: str = ""
    group: str = "methods"


@dataclass
class BenchReport:
    dataset: str
    bases: int
    rows: list = field(default_factory=list)

    def add(self, row: BenchRow):
        self.rows.append(row)
        return row

    def table(self, group: str | None = None) -> str:
        rows = [r for r in self.rows if group is None or r.group == group]
        head = ("method", "bpb", "encode_s", "decode_s", "params", "note")
        body = [(r.method, _fmt(r.bpb, 4), _fmt(r.encode_s, 2), _fmt(r.decode_s, 2),
                 "-" if r.params is None else str(r.params), r.note) for r in rows]
        widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)

    def text(self) -> str:
        parts = [f"dataset: {self.dataset}  bases: {self.bases}"]
        for group in dict.fromkeys(r.group for r in self.rows):
            parts += ["", f"[{group}]", self.table(group)]
        return "\n".join(parts)

    def to_json(self) -> str:
        return json.dumps({"dataset": self.dataset, "bases": self.bases,
                           "rows": [asdict(r) for r in self.rows]}, indent=2)

    def to_tsv(self) -> str:
        lines = ["group\tmethod\tbpb\tencode_s\tdecode_s\tparams\tnote"]
        for r in self.rows:
            lines.append("\t".join(str(x) for x in (r.group, r.method, r.bpb, r.encode_s, r.decode_s,
                                                     r.params, r.note)))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        written = []
        for name, text in (("report.json", self.to_json()), ("report.tsv", self.to_tsv()),
                           ("report.txt", self.text() + "\n")):
            path = os.path.join(out_dir, name)
            with open(path, "w") as fh:
                fh.write(text)
            written.append(path)
        from .plotting import plot_report
        written += plot_report(self, out_dir)
        return written


def _fmt(x, digits):
    return "-" if x is None else f"{x:.{digits}f}"


def parse_model_spec(spec: str, ngram: int) -> EntropyModel:
    """``uniform`` or ``order-k:<k>`` (``order-k`` alone means k=4)."""
    if spec == "uniform":
        return UniformModel(ngram)
    if spec.startswith("order-k"):
        k = int(spec.split(":", 1)[1]) if ":" in spec else 4
        return OrderKEntropyModel(k, ngram)
    raise ConfigError(f"unknown model {spec!r}; expected uniform or order-k:<k>")


def codec_row(method: str, records, model: EntropyModel, grouping: GroupingConfig, workdir: str,
              workers=None, n_mode=N_SIDE, group="methods") -> BenchRow:
    """Compress ``records`` through files on disk and time both directions."""
    n_bases = sum(r.seq.length for r in records)
    src = os.path.join(workdir, "input.fa")
    arc = os.path.join(workdir, f"{_slug(method)}.gnf")
    back = os.path.join(workdir, f"{_slug(method)}.out.fa")
    with open(src, "wb") as fh:
        fh.write(write_fasta(records))
    t0 = time.perf_counter()
    with open(src, "rb") as fh:
        recs = parse_fasta(fh.read())
    archive = compress(recs, model, grouping, n_mode, workers)
    with open(arc, "wb") as fh:
        fh.write(archive.to_bytes())
    t_enc = time.perf_counter() - t0
    t0 = time.perf_counter()
    with open(arc, "rb") as fh:
        out = decompress(fh.read(), model, workers)
    with open(back, "wb") as fh:
        fh.write(write_fasta(out))
    t_dec = time.perf_counter() - t0
    size = os.path.getsize(arc)
    ok = all(a.seq == b.seq for a, b in zip(recs, out)) and len(out) == len(recs)
    params = model.model.count_params() if isinstance(model, GeneformerEntropyModel) else None
    cfg = {"group_len": grouping.group_len, "context_len": grouping.context_len,
           "ngram": grouping.ngram, "byte_group": grouping.byte_group, "n_mode": n_mode,
           "groups": len(archive.payloads), "bytes": size, "bases": n_bases}
    return BenchRow(method, size * 8 / n_bases, t_enc, t_dec, params, cfg,
                    "" if ok else "ROUND TRIP FAILED", group)


def external_row(tool: str, fasta_path: str, n_bases: int, workdir: str) -> BenchRow:
    enc, dec = EXTERNAL_TOOLS[tool]
    if shutil.which(enc[0]) is None:
        return BenchRow(tool, None, None, None, note="not installed; skipped", group="external")
    out = os.path.join(workdir, f"input.{tool}")
    t0 = time.perf_counter()
    with open(fasta_path, "rb") as fin, open(out, "wb") as fout:
        subprocess.run(enc, stdin=fin, stdout=fout, check=True)
    t_enc = time.perf_counter() - t0
    t0 = time.perf_counter()
    with open(out, "rb") as fin:
        subprocess.run(dec, stdin=fin, stdout=subprocess.DEVNULL, check=True)
    t_dec = time.perf_counter() - t0
    return BenchRow(tool, os.path.getsize(out) * 8 / n_bases, t_enc, t_dec,
                    note="whole FASTA text", group="external")


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in s)


# -- ablation grids ---------------------------------------------------------------

@dataclass
class Variant:
    name: str
    model: ModelConfig
    grouping_fixed: bool = True


def variant_config(base: ModelConfig, bg=True, ng=True, latent=True, cut=True) -> ModelConfig:
    ngram = base.ngram if ng else 1
    g = base.byte_group if bg else 1
    ctx = fit_context(ngram, g, base.context_len)
    return replace(base, ngram=ngram, byte_group=g, context_len=ctx, latent_array=latent, segment_cut=cut)


def grouping_table_variants(base: ModelConfig) -> list[Variant]:
    """The four rows of the multi-level grouping ablation (BG / NG / FG)."""
    return [
        Variant("BG- NG- FG-", variant_config(base, bg=False, ng=False), False),
        Variant("BG+ NG- FG-", variant_config(base, bg=True, ng=False), False),
        Variant("BG+ NG+ FG-", variant_config(base, bg=True, ng=True), False),
        Variant("BG+ NG+ FG+", variant_config(base, bg=True, ng=True), True),
    ]


def latent_table_variants(base: ModelConfig) -> list[Variant]:
    """The three rows of the latent-array / segment-cut ablation."""
    return [
        Variant("latent- cut+", variant_config(base, latent=False, cut=True)),
        Variant("latent+ cut-", variant_config(base, latent=True, cut=False)),
        Variant("latent+ cut+", variant_config(base, latent=True, cut=True)),
    ]


def train_variant(cfg: ModelConfig, train_recs, val_recs, tcfg: TrainConfig, cache: dict | None = None):
    key = json.dumps(cfg.to_json(), sort_keys=True)
    if cache is not None and key in cache:
        return cache[key]
    model = GeneformerModel(cfg)
    res = train(train_recs, model, tcfg, val=val_recs)
    out = (GeneformerEntropyModel(res.best_blob), res)
    if cache is not None:
        cache[key] = out
    return out


def run_bench(fasta_path: str, models=("uniform", "order-k:4"), checkpoints=(), ngram: int = 2,
              byte_group: int = 4, group_len: int = DEFAULT_GROUP_LEN, workers=None, external=True,
              train_toy: bool = False, ablation: bool = False, toggles: dict | None = None,
              train_cfg: TrainConfig | None = None, base_model: ModelConfig | None = None,
              seed: int = 0, n_mode: str = N_SIDE, workers_scan=(), log=None) -> BenchReport:
    """Run the configured rows; with training, everything is measured on the test split."""
    with open(fasta_path, "rb") as fh:
        records = parse_fasta(fh.read())
    needs_training = train_toy or ablation or bool(toggles)
    if needs_training:
        tr, va, te = split_dataset(records, seed=seed)
        if not te:
            te = va or tr
        if not va:
            va = tr
        evalset, label = te, "test split"
    else:
        tr = va = []
        evalset, label = records, "all records"
    n_bases = sum(r.seq.length for r in evalset)
    report = BenchReport(f"{os.path.basename(fasta_path)} ({label}, {len(evalset)} records)", n_bases)
    say = log or (lambda msg: None)
    ctx = fit_context(ngram, byte_group)
    with tempfile.TemporaryDirectory() as work:
        grouping = GroupingConfig(group_len, ctx, ngram, byte_group)
        for spec in models:
            say(f"bench: {spec}")
            report.add(codec_row(spec, evalset, parse_model_spec(spec, ngram), grouping, work, workers, n_mode))
        for path in checkpoints:
            with open(path, "rb") as fh:
                gm = GeneformerEntropyModel(fh.read())
            c = gm.config
            g = GroupingConfig(group_len, c.context_len, c.ngram, c.byte_group)
            say(f"bench: checkpoint {path}")
            report.add(codec_row(f"geneformer:{os.path.basename(path)}", evalset, gm, g, work, workers, n_mode))
        if external:
            src = os.path.join(work, "eval.fa")
            with open(src, "wb") as fh:
                fh.write(write_fasta(evalset))
            for tool in EXTERNAL_TOOLS:
                report.add(external_row(tool, src, n_bases, work))

        tcfg = train_cfg or TrainConfig(seed=seed)
        base = base_model or ModelConfig.toy(ngram=ngram, byte_group=byte_group, context_len=ctx, seed=seed)
        cache: dict = {}
        longest = max(r.seq.length for r in evalset)

        def grouping_for(v: Variant):
            c = v.model
            # without fixed-length grouping each record is one group
            glen = group_len if v.grouping_fixed else max(longest, c.context_len + 1)
            return GroupingConfig(glen, c.context_len, c.ngram, c.byte_group)

        if train_toy or toggles:
            t = toggles or {}
            v = Variant("geneformer-toy", variant_config(base, bg=not t.get("no_bg"), ng=not t.get("no_ng"),
                                                         latent=not t.get("no_latent_array"),
                                                         cut=not t.get("no_segment_cut")),
                        not t.get("no_fg"))
            say(f"bench: training {v.name}")
            gm, res = train_variant(v.model, tr, va, tcfg, cache)
            row = codec_row(v.name, evalset, gm, grouping_for(v), work, workers, n_mode)
            row.note = f"val bpb {res.best_bpb:.4f}"
            report.add(row)
        if ablation:
            for group, variants in (("grouping ablation (BG/NG/FG)", grouping_table_variants(base)),
                                    ("latent ablation (latent array/segment cut)", latent_table_variants(base))):
                for v in variants:
                    say(f"bench: training {group} / {v.name}")
                    gm, res = train_variant(v.model, tr, va, tcfg, cache)
                    row = codec_row(v.name, evalset, gm, grouping_for(v), work, workers, n_mode, group)
                    row.note = f"val bpb {res.best_bpb:.4f}"
                    report.add(row)
        if workers_scan:
            gm = None
            if cache:
                gm = next(iter(cache.values()))[0]
            elif checkpoints:
                with open(checkpoints[0], "rb") as fh:
                    gm = GeneformerEntropyModel(fh.read())
            if gm is None:
                gm = GeneformerEntropyModel(GeneformerModel(base))
            c = gm.config
            g = GroupingConfig(group_len, c.context_len, c.ngram, c.byte_group)
            for w in workers_scan:
                say(f"bench: workers={w}")
                row = codec_row(f"workers={w}", evalset, gm, g, work, w, n_mode, "workers scan")
                row.config["workers"] = w
                report.add(row)
    return report


def count_groups(records, grouping: GroupingConfig) -> int:
    from .grouping import group_count, strip_n
    return sum(group_count(strip_n(r.seq.bases)[0].size, grouping.group_len) for r in records)
