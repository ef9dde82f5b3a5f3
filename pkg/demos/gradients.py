"""Analytic gradients of the full episode loss against central differences.

Every trainable array of every variant is perturbed coordinate by
coordinate; the worst relative error per array is printed.
"""
import numpy as np

from hgnn import HGNNModel, ModelConfig, Variant
from hgnn import diffcore as dc
from hgnn.episodes import Episode

rng = np.random.default_rng(0)
means = rng.normal(0, 3, size=(3, 6))
episode = Episode(3, 2, 2,
                  np.repeat(means, 2, axis=0) + rng.normal(size=(6, 6)), np.repeat(np.arange(3), 2),
                  np.repeat(means, 2, axis=0) + rng.normal(size=(6, 6)), np.repeat(np.arange(3), 2))

for variant in (Variant.PGNN_ONLY, Variant.IGNN_ONLY, Variant.HGNN, Variant.LABELPROP):
    model = HGNNModel.create(ModelConfig(d_in=6, d=5, adapter=True, variant=variant, n_way=3), seed=1)
    report = dc.gradient_report(lambda: model.loss(episode)[0].total, model.params.all())
    worst = max(err for err, _ in report.values())
    print(f"{variant.value}: {len(report)} arrays, worst relative error {worst:.1e}")
    for name, (err, index) in sorted(report.items(), key=lambda kv: -kv[1][0])[:3]:
        print(f"    {name:<22} {err:.1e} at {index}")
