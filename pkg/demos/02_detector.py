"""Train the eSOM detector on synthetic two-class traffic and inspect it.

Generates normal and attack feature clusters, trains the lattice while
reporting quantization progress, prints the U-Matrix landscape statistics,
then scores held-out samples.
"""

import numpy as np

from manetsec import esom


def make_two_class(n_per, sep, rng):
    normal = rng.normal(0.0, 1.0, size=(n_per, 7))
    attack = rng.normal(sep, 1.0, size=(n_per, 7))
    data = np.vstack([normal, attack])
    labels = np.concatenate([np.zeros(n_per, dtype=int), np.ones(n_per, dtype=int)])
    order = rng.permutation(len(data))
    return data[order], labels[order]


SEPARATION = 4.0  # per-feature shift, in baseline standard deviations

train, train_labels = make_two_class(800, SEPARATION, np.random.default_rng(1))
test, test_labels = make_two_class(400, SEPARATION, np.random.default_rng(2))
print(f"training on {len(train)} samples, separation {SEPARATION} sigma per feature")

normalized, stats = esom.normalize_features(train)
config = esom.SomConfig(rows=20, cols=28, epochs=14)


def progress(epoch, weights):
    grid = esom.SomGrid(config.rows, config.cols, weights)
    bmus = esom.bmu_indices(grid, normalized)
    qe = np.linalg.norm(normalized - weights[bmus], axis=1).mean()
    print(f"  epoch {epoch + 1:2d}: quantization error {qe:.4f}")


grid = esom.train_som(normalized, config, np.random.default_rng(3), on_epoch=progress)

umatrix = esom.compute_umatrix(grid)
labeling = esom.label_regions(grid, umatrix, normalized, train_labels,
                              config.hill_quantile)

print("\n== U-Matrix landscape ==")
for name, mask in (("normal valleys", labeling == esom.LABEL_NORMAL),
                   ("attack valleys", labeling == esom.LABEL_ATTACK),
                   ("hills", labeling == esom.LABEL_HILL)):
    print(f"  {name:15s}: {mask.sum():4d} neurons, "
          f"mean U-height {umatrix[mask].mean():.4f}")
ratio = umatrix[labeling == esom.LABEL_HILL].mean() / umatrix[labeling != esom.LABEL_HILL].mean()
print(f"  hill / valley height ratio: {ratio:.2f}")

print("\n== held-out evaluation ==")
model = esom.SomModel(grid=grid, labeling=labeling, stats=stats,
                      hill_quantile=config.hill_quantile)
results = esom.classify_batch(grid, labeling, esom.apply_normalization(stats, test))
verdicts = [c.verdict for c in results]
truth = [esom.VERDICT_ATTACK if l else esom.VERDICT_NORMAL for l in test_labels]
report = esom.evaluate(verdicts, truth)
print(f"  detection rate:      {report.detection_rate:.3f}")
print(f"  false alarm rate:    {report.false_alarm_rate:.3f}")
print(f"  unclassified:        {report.unclassified_fraction:.3f} "
      "(best match landed on a hill)")

blob = model.to_bytes()
back = esom.SomModel.from_bytes(blob)
print(f"\nmodel file round trip: {len(blob)} bytes, "
      f"{back.grid.rows}x{back.grid.cols} lattice restored")
