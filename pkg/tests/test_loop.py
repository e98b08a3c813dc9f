import numpy as np
import pytest

from spatialvl import NumericError, ValidationError
from spatialvl.dataset import SyntheticSpec, generate_dataset
from spatialvl.model import init_params
from spatialvl.training import TaskSchedule, arm_ratios, evaluate, finetune, pretrain
from spatialvl.training.loop import read_loss_csv, stream, write_loss_csv


@pytest.fixture(scope="module")
def short_run(small_data, vocab, toy_cfg):
    sch = TaskSchedule(arm_ratios("MLM+MRC+SRC+OPR"), 26, 0)
    return pretrain(toy_cfg, small_data, sch, vocab, seed=7)


def test_runs_every_scheduled_step(short_run):
    tasks = [r.task for r in short_run.log]
    assert len(tasks) + len(short_run.skipped) == 26
    assert tasks.count("MLM") == 20
    assert all(r.loss >= 0 for r in short_run.log)


def test_pretrain_deterministic(short_run, small_data, vocab, toy_cfg):
    again = pretrain(toy_cfg, small_data, TaskSchedule(arm_ratios("MLM+MRC+SRC+OPR"), 26, 0), vocab, seed=7)
    assert [(r.task, r.loss) for r in again.log] == [(r.task, r.loss) for r in short_run.log]
    assert all(np.array_equal(again.params[k], short_run.params[k]) for k in short_run.params)


def test_initial_losses_near_chance(short_run, vocab):
    assert short_run.task_losses("SRC")[0] == pytest.approx(np.log(10), rel=0.1)
    assert short_run.task_losses("MLM")[0] == pytest.approx(np.log(len(vocab)), rel=0.1)


def test_stop_after_keeps_horizon(short_run, small_data, vocab, toy_cfg):
    part = pretrain(toy_cfg, small_data, TaskSchedule(arm_ratios("MLM+MRC+SRC+OPR"), 26, 0), vocab, seed=7,
                    stop_after=10)
    assert [r.lr for r in part.log] == [r.lr for r in short_run.log if r.step <= 10]


def test_does_not_mutate_given_params(small_data, vocab, toy_cfg):
    p0 = init_params(toy_cfg, stream(0, "init"))
    snapshot = {k: v.copy() for k, v in p0.items()}
    pretrain(toy_cfg, small_data, TaskSchedule({"MLM": 1}, 2, 0), vocab, params=p0)
    assert all(np.array_equal(p0[k], snapshot[k]) for k in p0)


def test_empty_dataset(vocab, toy_cfg):
    with pytest.raises(ValidationError):
        pretrain(toy_cfg, [], TaskSchedule({"MLM": 1}, 2, 0), vocab)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_names_step(small_data, vocab, toy_cfg):
    p0 = init_params(toy_cfg, stream(0, "init"))
    p0["opr.b2"][:] = 1e200
    with pytest.raises(NumericError, match="OPR loss at step 1"):
        pretrain(toy_cfg, small_data, TaskSchedule({"OPR": 1}, 2, 0), vocab, params=p0)


def test_loss_csv_round_trip(tmp_path, short_run):
    path = tmp_path / "loss.csv"
    write_loss_csv(path, short_run.log)
    assert path.read_text().splitlines()[0] == "step,task,loss,lr"
    assert read_loss_csv(path) == short_run.log


def test_untrained_accuracy_is_chance(vocab, toy_cfg):
    spec = SyntheticSpec(num_examples=600, seed=11, val_fraction=0.0)
    data = generate_dataset(spec)
    params = init_params(toy_cfg, np.random.default_rng(0))
    acc, correct, total = evaluate(params, toy_cfg, vocab, data)
    assert total == 600 and correct == round(acc * total)
    assert abs(acc - 0.25) < 0.05


def test_evaluate_empty(vocab, toy_cfg):
    with pytest.raises(ValidationError):
        evaluate(init_params(toy_cfg, np.random.default_rng(0)), toy_cfg, vocab, [])


def test_finetune_deterministic(short_run, small_data, vocab, toy_cfg):
    train = [e for e in small_data if e.split == "train"]
    val = [e for e in small_data if e.split == "val"]
    a = finetune(short_run.params, toy_cfg, vocab, train, val, steps=4, seed=2)
    b = finetune(short_run.params, toy_cfg, vocab, train, val, steps=4, seed=2)
    assert [r.loss for r in a.log] == [r.loss for r in b.log]
    assert a.accuracy == b.accuracy and 0.0 <= a.accuracy <= 1.0
    assert a.log[0].loss == pytest.approx(np.log(4), rel=0.2)


def test_finetune_head_only_freezes_encoder(short_run, small_data, vocab, toy_cfg):
    res = finetune(short_run.params, toy_cfg, vocab, small_data, [], steps=3, train_encoder=False)
    for k, v in short_run.params.items():
        assert np.array_equal(res.params[k], v) == (not k.startswith("match."))
    assert res.accuracy is None
