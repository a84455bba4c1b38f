import numpy as np
import pytest

from gnfzip.baselines import OrderKEntropyModel, UniformModel
from gnfzip.errors import BadArchive, ConfigError, CorruptStream, CrcMismatch, IntegrityError, Mismatch, ModelMismatch
from gnfzip.geneformer import GeneformerEntropyModel, GeneformerModel, ModelConfig
from gnfzip.grouping import GroupingConfig, fit_context
from gnfzip.pipeline import (N_SIDE, N_STREAM, Archive, ArchiveHeader, compress, decompress,
                             decompress_one, get_varint, put_varint, verify)
from gnfzip.sequence_io import BaseSeq, FastaRecord
from gnfzip.trainer import TrainConfig, train

from conftest import randomize
from oracles import random_bases

GRID = [(ng, g) for ng in (1, 2, 3) for g in (1, 2, 4)]


def small_config(ngram, g, **kw):
    ctx = fit_context(ngram, g, target=48)
    base = dict(d_model=8, d_ff=16, n_heads=2, context_len=ctx, ngram=ngram, byte_group=g,
                conv_kernel=2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def trained():
    """One briefly trained model per (ngram, byte_group)."""
    rng = np.random.default_rng(7)
    template = rng.integers(0, 4, 400).astype(np.uint8)
    seqs = [np.where(rng.random(400) < 0.05, rng.integers(0, 4, 400), template).astype(np.uint8)
            for _ in range(6)]
    out = {}
    for ng, g in GRID:
        model = GeneformerModel(small_config(ng, g))
        res = train(seqs, model, TrainConfig(batch_size=16, lr=2e-3, epochs=1, max_examples=256))
        out[ng, g] = GeneformerEntropyModel(res.best_blob)
    return out


def models_for(ng, g, trained):
    fresh = GeneformerEntropyModel(GeneformerModel(small_config(ng, g)))
    return {"uniform": UniformModel(ng), "order-k": OrderKEntropyModel(3, ng),
            "geneformer-untrained": fresh, "geneformer-trained": trained[ng, g]}


def grouping_for(model, ng, g, group_len):
    ctx = model.config.context_len if hasattr(model, "config") else fit_context(ng, g, target=48)
    return GroupingConfig(group_len, ctx, ng, g)


def round_trip(recs, model, grouping, n_mode=N_SIDE, workers=None):
    archive = compress(recs, model, grouping, n_mode, workers)
    blob = archive.to_bytes()
    again = decompress(blob, model, workers)
    assert [r.header for r in again] == [r.header for r in recs]
    for a, b in zip(again, recs):
        np.testing.assert_array_equal(a.seq.bases, b.seq.bases)
    return archive


@pytest.mark.parametrize("ng,g", GRID)
@pytest.mark.parametrize("n_mode", [N_SIDE, N_STREAM])
def test_lossless_over_config_grid(ng, g, n_mode, trained, rng):
    recs = [FastaRecord(f"r{i} x", BaseSeq(f"r{i}", random_bases(rng, n, 0.01, run_max=30)))
            for i, n in enumerate((1000, 1537))]
    for name, model in models_for(ng, g, trained).items():
        grouping = grouping_for(model, ng, g, 401)
        archive = round_trip(recs, model, grouping, n_mode)
        assert archive.header.model_kind == model.kind


def test_long_sequences_with_baselines(rng):
    b = random_bases(rng, 1_000_000, 0.01, run_max=500)
    for model in (UniformModel(), OrderKEntropyModel(4)):
        round_trip([FastaRecord("big", BaseSeq("big", b))], model, GroupingConfig(213_000, 64, 1, 1))


def test_edge_shapes(rng):
    model = OrderKEntropyModel(2)
    cfg = GroupingConfig(100, 64, 1, 1)
    cases = ["N" * 50, "ACGT", "A" * 64, "A" * 65, "N" * 10 + "ACGT" * 40 + "N" * 5, "ACGTN" * 200]
    recs = [FastaRecord(f"c{i}", BaseSeq.from_str(s, f"c{i}")) for i, s in enumerate(cases)]
    for mode in (N_SIDE, N_STREAM):
        round_trip(recs, model, cfg, mode)
        round_trip(recs[-1:], UniformModel(), cfg, mode)


def test_ns_inside_fragments_with_neural_model(rng):
    model = GeneformerEntropyModel(randomize(GeneformerModel(small_config(1, 2)), seed=1))
    ctx = model.config.context_len
    b = random_bases(rng, 900, 0.0)
    b[3:9] = 4
    b[ctx + 200:ctx + 230] = 4
    b[-3:] = 4
    for mode in (N_SIDE, N_STREAM):
        round_trip([FastaRecord("n", BaseSeq("n", b))], model, GroupingConfig(300, ctx, 1, 2), mode)


def test_model_mismatch_is_reported_before_decoding(rng):
    cfg = small_config(1, 1)
    a = GeneformerEntropyModel(randomize(GeneformerModel(cfg), seed=1))
    b = GeneformerEntropyModel(randomize(GeneformerModel(cfg), seed=2))
    grouping = GroupingConfig(200, cfg.context_len, 1, 1)
    seq = BaseSeq("s", random_bases(rng, 600))
    archive = compress(seq, a, grouping)
    with pytest.raises(ModelMismatch):
        decompress(archive, b)
    with pytest.raises(ModelMismatch):
        decompress(archive, UniformModel())
    with pytest.raises(ModelMismatch):
        decompress(archive)
    with pytest.raises(ModelMismatch):
        compress(seq, UniformModel(2), grouping)
    with pytest.raises(ModelMismatch):
        compress(seq, a, GroupingConfig(200, 32, 1, 1))
    with pytest.raises(ConfigError):
        compress(seq, UniformModel(), grouping, n_mode="sideways")
    k2 = compress(seq, OrderKEntropyModel(2), GroupingConfig(200, 64, 1, 1))
    with pytest.raises(ModelMismatch):
        decompress(k2, OrderKEntropyModel(3))
    assert decompress_one(k2) == seq


def test_batched_and_sequential_coding_agree(rng):
    model = GeneformerEntropyModel(randomize(GeneformerModel(small_config(2, 2)), seed=4, scale=0.2))
    ctx = model.config.context_len
    recs = [FastaRecord(f"r{i}", BaseSeq(f"r{i}", random_bases(rng, n, 0.01))) for i, n in enumerate((700, 410))]
    grouping = GroupingConfig(150, ctx, 2, 2)
    one = compress(recs, model, grouping, workers=1).to_bytes()
    for w in (2, 3, None):
        assert compress(recs, model, grouping, workers=w).to_bytes() == one
    outs = [decompress(one, model, workers=w) for w in (1, 4, None)]
    for o in outs[1:]:
        for a, b in zip(o, outs[0]):
            assert np.array_equal(a.seq.bases, b.seq.bases)


def test_encoder_and_decoder_tables_lockstep(rng):
    model = GeneformerEntropyModel(randomize(GeneformerModel(small_config(1, 1)), seed=6, scale=0.2))
    ctx = model.config.context_len
    seq = BaseSeq("s", random_bases(rng, 2000, 0.01))
    grouping = GroupingConfig(500, ctx, 1, 1)
    for mode in (N_SIDE, N_STREAM):
        enc_log, dec_log = [], []
        archive = compress(seq, model, grouping, mode, table_log=enc_log)
        decompress(archive, model, table_log=dec_log)
        assert len(enc_log) == len(dec_log) == 1000
        assert sorted(enc_log) == sorted(dec_log)


def test_bpb_accounting_identity(rng):
    seq = BaseSeq("s", random_bases(rng, 5000, 0.02))
    archive = compress(seq, OrderKEntropyModel(2), GroupingConfig(1000, 64, 1, 1))
    st = archive.stats()
    blob = archive.to_bytes()
    assert st.total_bits == len(blob) * 8
    assert st.header_bits + st.fragment_bits + st.payload_bits == st.total_bits
    assert st.payload_bits == sum(len(p) for p in archive.payloads) * 8
    assert st.fragment_bits == 5 * 16 * 8
    assert st.bpb == len(blob) * 8 / 5000
    report = verify(seq, blob)
    assert abs(report["bpb"] - st.bpb) < 1e-9 and report["ok"]
    assert report["group_sizes"] == st.group_sizes


def test_uniform_model_costs_two_bits_per_base(rng):
    seq = BaseSeq("s", rng.integers(0, 4, 200_000).astype(np.uint8))
    st = compress(seq, UniformModel(), GroupingConfig(50_000, 64, 1, 1)).stats()
    groups = len(st.group_sizes)
    body = 200_000 - 64 * groups
    # payloads cost 2 bits per coded base plus at most one flush per group
    assert 2 * body <= st.payload_bits <= 2 * body + 64 * groups
    assert st.fragment_bits == 2 * 64 * groups
    assert st.bpb == pytest.approx(2.0 + st.header_bits / 200_000, abs=64 * groups / 200_000)


def test_fragment_overhead_at_large_groups(rng):
    seq = BaseSeq("s", rng.integers(0, 4, 426_000).astype(np.uint8))
    st = compress(seq, UniformModel(), GroupingConfig(213_000, 64, 1, 1)).stats()
    assert st.fragment_bpb == pytest.approx(0.0006, abs=0.00005)


def test_compress_is_deterministic(rng):
    model = GeneformerEntropyModel(randomize(GeneformerModel(small_config(1, 2)), seed=3))
    seq = BaseSeq("s", random_bases(rng, 800, 0.01))
    grouping = GroupingConfig(250, model.config.context_len, 1, 2)
    assert compress(seq, model, grouping).to_bytes() == compress(seq, model, grouping).to_bytes()


def test_header_round_trip_and_framing(rng):
    recs = [FastaRecord(f"r{i} desc", BaseSeq(f"r{i}", random_bases(rng, 700, 0.03))) for i in range(3)]
    archive = compress(recs, OrderKEntropyModel(3), GroupingConfig(300, 64, 1, 1), N_STREAM)
    blob = archive.to_bytes()
    hdr, pos = ArchiveHeader.parse(blob)
    assert hdr == archive.header
    assert pos + sum(hdr.payload_sizes) == len(blob)
    assert Archive.from_bytes(blob).to_bytes() == blob
    with pytest.raises(BadArchive):
        Archive.from_bytes(blob + b"\x00")
    with pytest.raises(IntegrityError):
        Archive.from_bytes(b"GNF0" + blob[4:])


def test_varints():
    for v in (0, 1, 127, 128, 300, 2 ** 32, 2 ** 63 - 1):
        out = bytearray()
        put_varint(out, v)
        assert get_varint(bytes(out) + b"\xff", 0) == (v, len(out))


def test_bit_flips_never_decode_silently(rng):
    seq = BaseSeq("s", random_bases(rng, 3000, 0.01))
    model = OrderKEntropyModel(2)
    blob = compress(seq, model, GroupingConfig(700, 64, 1, 1)).to_bytes()
    hits = 0
    for _ in range(300):
        bad = bytearray(blob)
        i = int(rng.integers(0, len(bad)))
        bad[i] ^= 1 << int(rng.integers(0, 8))
        try:
            out = decompress(bytes(bad), model)
        except (IntegrityError, ModelMismatch):
            hits += 1
            continue
        assert np.array_equal(out[0].seq.bases, seq.bases)
    assert hits > 250


def test_verify_reports_mismatch(rng):
    seq = BaseSeq("s", random_bases(rng, 2000))
    archive = compress(seq, UniformModel(), GroupingConfig(500, 64, 1, 1))
    other = seq.bases.copy()
    other[1234] = (other[1234] + 1) % 4
    with pytest.raises(Mismatch) as exc:
        verify(BaseSeq("s", other), archive)
    assert exc.value.position == 1234
    payload = bytearray(archive.payloads[1])
    payload[len(payload) // 2] ^= 0x10
    archive.payloads[1] = bytes(payload)
    with pytest.raises((Mismatch, CorruptStream, CrcMismatch)):
        verify(seq, archive)
