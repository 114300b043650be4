import hashlib
import struct

import numpy as np
import pytest
from sklearn.pipeline import make_pipeline

from cdmil.bags import build_bag
from cdmil.embedding import (
    BagBatch,
    BagEmbedder,
    HashEmbeddingBackend,
    HttpEmbeddingBackend,
    PrecomputedFileBackend,
    assemble,
    instance_text,
    make_backend,
    write_precomputed,
)
from cdmil.exceptions import BagOverflow, DimensionMismatch, MissingEmbedding
from cdmil.mil import MultiViewGatedMIL
from cdmil.prompts import InferenceRun
from cdmil.schema import DistortionInstance, Utterance, get_schema

KOACD = get_schema("koacd")


def make_bag(uid="u1", saliences=(0.6, 0.2), label="Labeling"):
    u = Utterance(uid, f"sentence {uid}", (label,), "koacd")
    insts = [DistortionInstance(label, f"text {uid} {k}", s, "p") for k, s in enumerate(saliences)]
    return build_bag(u, [InferenceRun(uid, "p", True, insts, [])])


def test_hash_backend_is_deterministic_unit_norm():
    be = HashEmbeddingBackend(16)
    a = be.embed_many(["x", "y", "x"])
    assert a.shape == (3, 16)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0)
    np.testing.assert_array_equal(a[0], a[2])
    np.testing.assert_array_equal(a[0], HashEmbeddingBackend(16).embed_text("x"))
    assert not np.allclose(a[0], a[1])


def _write_three_entry_file(path):
    # written independently of the package's writer
    texts = ["alpha", "Labeling: beta", "gamma"]
    vecs = np.arange(12, dtype="<f4").reshape(3, 4) / 10
    with open(path, "wb") as fh:
        fh.write(b"CDEMB001" + struct.pack("<II", 4, 3))
        for t, v in zip(texts, vecs):
            fh.write(hashlib.sha256(t.encode()).digest() + v.tobytes())
    return texts, vecs


def test_precomputed_lookup(tmp_path):
    path = tmp_path / "emb.bin"
    texts, vecs = _write_three_entry_file(path)
    be = PrecomputedFileBackend(path)
    assert be.dimension == 4
    np.testing.assert_allclose(be.embed_many(texts[::-1]), vecs[::-1].astype(float))
    with pytest.raises(MissingEmbedding):
        be.embed_text("delta")
    with pytest.raises(DimensionMismatch):
        PrecomputedFileBackend(path, dimension=8)


def test_write_precomputed_matches_reference_layout(tmp_path):
    ref = tmp_path / "ref.bin"
    texts, vecs = _write_three_entry_file(ref)
    ours = tmp_path / "ours.bin"
    write_precomputed(ours, texts, vecs)
    assert ours.read_bytes() == ref.read_bytes()
    assert (tmp_path / "ours.bin.manifest.jsonl").read_text().count("\n") == 3


def test_http_backend_batches_and_memoizes():
    calls = []

    def post(url, payload):
        calls.append(payload["texts"])
        return {"vectors": [[float(len(t)), 1.0] for t in payload["texts"]]}

    be = HttpEmbeddingBackend("http://svc", dimension=2, batch_size=2, post=post)
    out = be.embed_many(["a", "bb", "ccc", "a"])
    np.testing.assert_array_equal(out[:, 0], [1, 2, 3, 1])
    assert calls == [["a", "bb"], ["ccc"]]
    be.embed_many(["bb"])
    assert len(calls) == 2

    bad = HttpEmbeddingBackend("http://svc", dimension=3, post=post)
    with pytest.raises(DimensionMismatch):
        bad.embed_many(["x"])


def test_make_backend(tmp_path):
    assert make_backend({"backend": "test_hash", "dimension": 8}).dimension == 8
    with pytest.raises(ValueError):
        make_backend({"backend": "nope"})


def test_assemble_pads_and_weights():
    be = HashEmbeddingBackend(8)
    bag = make_bag(saliences=(0.6, 0.2))
    eb = assemble(bag, be, 4, True, KOACD)
    np.testing.assert_allclose(eb.p, [0.75, 0.25, 0, 0])
    np.testing.assert_array_equal(eb.mask, [1, 1, 0, 0])
    np.testing.assert_array_equal(eb.X[2:], 0)
    np.testing.assert_array_equal(eb.X[0], be.embed_text(instance_text(bag.instances[0])))
    np.testing.assert_array_equal(eb.z, be.embed_text(bag.text))
    assert eb.y[KOACD.index("Labeling")] == 1 and eb.y.sum() == 1
    uniform = assemble(bag, be, 4, False)
    np.testing.assert_allclose(uniform.p, [0.5, 0.5, 0, 0])
    raw = assemble(bag, be, 4, True, salience_mode="raw")
    np.testing.assert_allclose(raw.p, [0.6, 0.2, 0, 0])
    with pytest.raises(BagOverflow):
        assemble(bag, be, 1)


def test_instance_text_format():
    assert instance_text(DistortionInstance("Labeling", "I'm lacking.", 0.3, "p")) == "Labeling: I'm lacking."


def test_bag_batch_save_load(tmp_path):
    batch = BagEmbedder(HashEmbeddingBackend(4)).fit_transform([make_bag("a"), make_bag("b", (1.0,))])
    assert batch.X.shape == (2, 2, 4)
    path = tmp_path / "b.npz"
    batch.save(path, y=[1, 2])
    loaded, y = BagBatch.load(path)
    np.testing.assert_array_equal(loaded.X, batch.X)
    assert loaded.ids == ("a", "b") and list(y) == [1, 2]
    assert batch[[1]].ids == ("b",)


def test_embedder_in_sklearn_pipeline():
    labels = ["Labeling", "Personalization"]
    bags = [make_bag(f"u{i}", (0.5, 0.5, 0.2), labels[i % 2]) for i in range(20)]
    y = [b.target for b in bags]
    pipe = make_pipeline(
        BagEmbedder(HashEmbeddingBackend(8)),
        MultiViewGatedMIL(n_views=1, hidden_dim=4, max_epochs=2, validation_fraction=0.2),
    )
    pipe.fit(bags, y)
    assert set(pipe.predict(bags)) <= set(labels)
