"""Train SGN1 on four synthetic lesion images until it memorises them.

Writes label maps and overlays for the training images to OUT
(default ./overfit_demo).

    python3 demos/overfit_synthetic.py [OUT]
"""
import sys
import time
from pathlib import Path

from lesionseg import data as D
from lesionseg import metrics as M
from lesionseg import netbuilder as N
from lesionseg import trainer as T


def main(out):
    out = Path(out)
    train_set = D.synth_dataset(4, (96, 96), seed=0)
    D.save_samples(train_set, out / "data")
    spec = N.build_sgn(1)
    t0 = time.perf_counter()

    def lesion_iou(params, epoch):
        pairs = [(s.source_id, N.predict_labels(spec, params, s.image), s.label) for s in train_set]
        v = M.report(pairs, tolerance_px=1).per_class[2]["iou"]
        print(f"epoch {epoch:3d}  training lesion IoU {v:.4f}  ({time.perf_counter() - t0:.0f}s)")
        return v

    # default hyperparameters; stop once the images are memorised
    cfg = T.RunConfig(arch=spec, seed=0, epochs=200, size=(96, 96), out=str(out / "run"))
    run = T.train(cfg, train_set, validate=lesion_iou,
                  on_epoch=lambda epoch, params, log: log.val_rows[-1][1] < 0.95)
    print(run.stop_reason)
    for img in sorted((out / "data" / "images").glob("*.png")):
        T.predict(run.final, img, out / "predictions")
    print(f"label maps and overlays in {out / 'predictions'}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "overfit_demo")
