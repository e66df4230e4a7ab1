"""Smoke test for the clickadapt_py extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
or put a built `clickadapt_py.so` on PYTHONPATH.
"""

import json
import sys

import clickadapt_py as ca


def main() -> int:
    samples = ca.synth_dataset("domainA", 4, seed=1)
    assert len(samples) == 4
    sample_id, image, mask = samples[0]
    assert len(image) == 3 and len(image[0]) == 64 and len(mask) == 64

    model = ca.Model(seed=3)
    assert model.parameter_count > 20000
    pred = model.predict(image, [(32, 32, "positive")])
    assert pred.shape == (64, 64)
    assert all(0.0 < p < 1.0 for row in pred.probabilities for p in row)

    guidance = ca.encode_guidance([(10, 10, "positive")], 64, 64, 3)
    assert sum(map(sum, guidance[0])) == 29
    assert ca.iou(mask, mask) == 1.0
    assert ca.clicks_at_q([0.1] * 5 + [0.95] * 16, 0.9, 20) == 5
    click = ca.simulate_click([[0.0] * 64 for _ in range(64)], mask)
    assert click is not None and click[2] == "positive"

    model, losses = ca.train(samples, seed=0, config=json.dumps(
        {"stage1_epochs": 1, "stage2_epochs": 1, "importance_samples": 2}))
    assert len(losses) == 2 and model.has_importance

    config = json.dumps({"ia_steps": 2, "click_budget": 3})
    session = ca.Session(model, image, gt=mask, ia=True, sa=True, config=config)
    used, final_iou, curve = session.run_simulated()
    assert 0 <= used <= 3 and len(curve) == used + 1

    adapter = ca.SequenceAdapter(model, seed=0, config=config)
    stepped = adapter.finish(session)
    assert session.finished and stepped == (used > 0)

    report = json.loads(ca.evaluate(model, samples, mode="sa", seeds=[0, 1], config=config))
    assert report["images"] == 4 and len(report["seeds"]) == 2
    print(f"ok: {sample_id} clicks={used} iou={final_iou} sa clicks@90={report['mean_clicks']:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
