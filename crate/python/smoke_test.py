"""Smoke test for the unsq_py extension module.

Build and install first, e.g.

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/unsq_py-*.whl

then run `python python/smoke_test.py`.
"""

import math
import tempfile

import unsq_py as u


def main():
    assert u.count_params(64, "paper-compat") == 31042434
    assert u.count_params(4, "paper-compat") == 122394
    assert u.count_params(2, "plain") == 30534

    p = u.softmax_temperature([2.0, 0.0], (1, 2, 1, 1), 2.0)
    assert abs(p[0] - 1 / (1 + math.exp(-1))) < 1e-12

    loss, grad = u.weighted_cross_entropy([0.0, 0.0], (1, 2, 1, 1), [1.0], w_f=17.8)
    assert abs(loss - 17.8 * math.log(2)) < 1e-12
    assert len(grad) == 2

    assert u.iou([1, 1, 0, 0], [1, 0, 0, 0]) == 0.5

    with tempfile.TemporaryDirectory() as tmp:
        train, test = u.generate_dataset(tmp, num_train=8, num_test=4, size=64, seed=1)
        w_f = u.class_weight(train)
        assert 10 < w_f < 30, w_f
        images, masks, shape = u.load_split(test)
        assert shape == (4, 1, 64, 64)

        model = u.UnetModel(2, batch_norm=True, seed=3)
        logits, lshape = model.predict_logits(images, shape)
        assert lshape == (4, 2, 64, 64)
        pred = model.predict_mask(images, shape)
        score = u.iou(pred, masks)
        assert 0.0 <= score <= 1.0

        path = f"{tmp}/model.ckpt"
        model.save(path)
        again = u.UnetModel.load(path)
        assert again.content_hash() == model.content_hash()
        assert again.predict_logits(images, shape)[0] == logits

    checks, failed, worst = u.grad_check(1)
    assert failed == 0, (failed, worst)
    print(f"ok: {model!r}, IoU of an untrained model {score:.3f}, "
          f"{checks} gradient checks, max relative error {worst:.2e}")


if __name__ == "__main__":
    main()
