"""Phantom corpus to cross-validated classifier, through the Python API.

Generates a small labelled corpus, registers the template to every scan,
builds the cranial shape model and reports the LDA confusion matrix.
Run with ``python3 demos/phantom_to_classifier.py [per_class]``.
"""
import sys
import time

import numpy as np

from cranioshape import pipeline, ssm, synth

per_class = int(sys.argv[1]) if len(sys.argv) > 1 else 5
t0 = time.time()

scans = synth.generate_corpus({c: per_class for c in range(4)}, seed=11,
                              config=synth.CorpusConfig(resolution=3.0))
template = synth.make_template(2.7)
scans = pipeline.preprocess(scans)          # cleans and appends mirrored twins
print(f"{len(scans)} scans, template with {template.mesh.n_vertices} vertices")

records = pipeline.morph_corpus(template, scans, "nicp-a")
v2nn = np.array([r.metrics["v2nn"] for r in records])
lm = np.array([r.metrics["landmark_error"] for r in records])
print(f"registration: v2nn {v2nn.mean():.3f} mm, landmark error {lm.mean():.3f} mm")

morphs = pipeline.MorphSet.from_records(records, scans, template.mesh.faces)
model = pipeline.build_models(morphs, template, submodels=False)["cranial"]
print(f"cranial model: {model.p} vertices, {model.k} modes")
print("compactness of the first 5 modes:", np.round(ssm.compactness(model, np.arange(1, 6)), 3))

best, report = pipeline.classify_morphs(morphs, model, "lda", max_components=20)
print(f"\nbest number of components: {best}")
print(report.to_text())
print(f"\ntotal {time.time() - t0:.0f} s")
