"""
Desk-scale end-to-end checks. Deselected by default; run with ``pytest -m slow``.
"""
import json
import random

import pytest
import yaml

from canids.canlog import (
    split_dataset,
)
from canids.cli import (
    main,
)
from canids.engine import (
    DetectionPipeline,
)
from canids.nn import (
    TrainConfig,
    evaluate,
    fold_batchnorm,
    init_model,
    train,
    transfer_train,
)
from canids.quant import (
    calibrate,
    calibration_set,
    evaluate_quantized,
    finetune_qat,
    qforward_batch,
)
from canids.tools.builder import (
    short_log,
)
from canids.typing import (
    AttackKind,
)
from canids.window import (
    DETECTOR_ATTACKS,
    attack_windows_for,
    concat_datasets,
    window_arrays,
    windows_of,
)

pytestmark = pytest.mark.slow

# About 200k frames per training log; held-out logs are shorter
TRAIN_SECONDS = 80.0
HELD_OUT_SECONDS = 20.0
HELD_OUT_SEED = 101


def test_ten_thousand_messages_under_random_delays(pair):
    log = short_log(duration=10.0, seed=8)[: 10000 + 3]
    features = windows_of(log)
    assert len(features) == 10000

    def jitter(index, ticket):
        draw = random.Random(index * 1_000_003 + ticket).random()
        return 0.0005 if draw < 0.02 else 0.0

    with DetectionPipeline(pair, queue_depth=8, injected_delay=jitter) as pipeline:
        for feature in features:
            pipeline.submit(feature)
        pipeline.shutdown()
        verdicts = list(pipeline.collect())

    assert [verdict.message_index for verdict in verdicts] == list(range(10000))
    matrix = window_arrays(log).features
    for position, detector in enumerate(pair):
        expected = qforward_batch(detector, matrix).tolist()
        assert [verdict[2 + position] for verdict in verdicts] == expected


def test_same_seed_same_metrics(tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text(
        yaml.safe_dump(
            {
                "seed": 2,
                "synthetic": {"duration": 3.0},
                "model": {"layer_units": [40, 32, 16, 1]},
                "train": {"epochs": 2, "learning_rate": 1e-3},
                "quant": {"calibration_size": 256, "qat_epochs": 1},
            }
        )
    )
    results = []
    for name in ("first", "second"):
        root = tmp_path / name
        base = ["--config", str(config)]
        log = root / "DoS.csv"
        model = root / "model.ckpt"
        qmodel = root / "model-af.qmodel"
        steps = (
            [*base, "--output-dir", str(root), "generate", "--output", str(log)],
            [*base, "--output-dir", str(root), "train", "--log", str(log)],
            [
                *base,
                "--output-dir",
                str(root),
                "quantize",
                "--model",
                str(model),
                "--log",
                str(log),
            ],
            [
                *base,
                "--output-dir",
                str(root),
                "evaluate",
                "--model",
                str(model),
                "--qmodel-af",
                str(qmodel),
                "--log",
                f"DoS={log}",
                "--split",
                "all",
            ],
        )
        for argv in steps:
            assert main(argv) == 0
        document = json.loads((root / "evaluation.json").read_text())
        results.append(document["results"])
    assert results[0] == results[1]


def _windows(kind, seed, duration=TRAIN_SECONDS):
    return attack_windows_for(kind, duration=duration, seed=seed)


@pytest.mark.parametrize("detector_index", (0, 1))
def test_desk_scale_detection_quality(detector_index):
    first_kind, second_kind = DETECTOR_ATTACKS[detector_index]
    cfg = TrainConfig(learning_rate=1e-3, epochs=8, batch_size=64, seed=detector_index)

    first_windows = _windows(first_kind, 1)
    first_train, first_val, _ = split_dataset(first_windows)
    model, _ = train(init_model(seed=detector_index), first_train, first_val, cfg)
    held_out = {
        kind: _windows(kind, HELD_OUT_SEED, HELD_OUT_SECONDS)
        for kind in (first_kind, second_kind)
    }
    before_transfer = evaluate(model, held_out[first_kind])

    second_train, second_val, _ = split_dataset(_windows(second_kind, 2))
    model = transfer_train(
        model, second_train, cfg, validation=second_val, retain=first_windows
    )
    folded = fold_batchnorm(model)

    both_train = concat_datasets(first_train, second_train)
    both_val = concat_datasets(first_val, second_val)
    calib = calibration_set(both_train, 1024, seed=detector_index)
    scales = calibrate(folded, calib)
    qat_cfg = TrainConfig(learning_rate=1e-5, epochs=3, batch_size=64)
    qmodel = finetune_qat(folded, scales, both_train, both_val, qat_cfg)

    f1_floor = {
        AttackKind.DOS: 99,
        AttackKind.FUZZY: 97,
        AttackKind.SPOOF_RPM: 99,
        AttackKind.SPOOF_GEAR: 99,
    }
    for kind, arrays in held_out.items():
        float_report = evaluate(folded, arrays)
        quant_report = evaluate_quantized(qmodel, arrays)
        assert float_report.f1 >= f1_floor[kind]
        assert float_report.auc >= 0.99
        assert quant_report.f1 >= float_report.f1 - 1
        assert quant_report.auc >= 0.99

    # learning the second attack must not cost the first one
    after_transfer = evaluate(folded, held_out[first_kind])
    assert after_transfer.f1 >= before_transfer.f1 - 1
