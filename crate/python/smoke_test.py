"""Smoke test for the indivaid_py extension: fixture -> two stages -> eval/embed/rank."""

import math
import sys
import tempfile
from pathlib import Path

import indivaid_py as ia


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "data"
        summary = ia.generate_fixture(str(root), "small")
        assert summary["train_ids"] == 5, summary
        assert ia.scan(str(root)) == summary

        c1 = ia.TrainConfig(stage=1)
        c1.update(epochs=3, encoder={"image_size": 64})
        try:
            c1.update(tau=-1.0)
        except ValueError as e:
            print("rejected bad config:", e)
        else:
            raise AssertionError("negative tau accepted")
        assert c1.epochs == 3

        model = ia.Model.init(c1, str(root))
        before = model.checksums()
        report = model.train(c1, str(root))
        assert report["final_loss"] < report["initial_loss"], report
        assert model.checksums()["image_encoder"] == before["image_encoder"]

        c2 = ia.TrainConfig(stage=2)
        c2.update(epochs=3, encoder={"image_size": 64})
        model.train(c2, str(root))
        ckpt = Path(tmp) / "ckpt"
        model.save(str(ckpt))
        loaded = ia.Model.load(str(ckpt))
        assert loaded.stage == 2 and loaded.checksums() == model.checksums()

        metrics = loaded.evaluate(str(root))
        cmc = [metrics["cmc"][k] for k in ("1", "5", "10")]
        assert cmc == sorted(cmc), cmc
        print(f"mAP {metrics['map']:.3f} top-1 {cmc[0]:.3f}")

        images = sorted((root / "query").rglob("*.png"))[:3]
        vecs = loaded.embed([str(p) for p in images])
        assert len(vecs) == 3 and len(vecs[0]) == loaded.embed_dim
        assert all(abs(math.sqrt(sum(v * v for v in x)) - 1) < 1e-9 for x in vecs)
        order, scores = ia.rank(vecs[:1], vecs)[0]
        assert order[0] == 0 and abs(scores[0] - 1) < 1e-12

    assert ia.triplet_hinge(0.4, 0.9, 0.3) == 0.0
    assert abs(sum(ia.smoothed_targets(2, 5, 0.1)) - 1) < 1e-12
    assert abs(ia.identity_loss([[0.0, 0.0, 0.0]], [1], 0.1) - math.log(3)) < 1e-12
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
