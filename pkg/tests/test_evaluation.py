import dataclasses

import numpy as np
import pytest
from conftest import linear_net

from rdinet import evaluation as E
from rdinet.attacks import AttackForm, Solver
from rdinet.inference import RoutingPolicy
from rdinet.network import flops_to_exit

PGD = Solver("pgd", epsilon=0.1, step_size=0.03, steps=3)


@pytest.fixture(scope="module")
def setup(tiny_net, tiny_data):
    return tiny_net, RoutingPolicy((0.9, 0.8, 0.5)), *tiny_data


def toy_two_exit():
    """Exit 1 is confident iff pixel 0 is lit; the exits cost 1 and 3 MFlops."""
    net = linear_net([[10.0, -10.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
    return dataclasses.replace(net, flops_per_exit=(1_000_000, 3_000_000))


def test_main_only_policy_saves_nothing(setup):
    net, _, x, y = setup
    s = E.test_accuracy(net, RoutingPolicy.main_only(4), x, y)
    assert s.saving == 0.0
    assert s.avg_mflops == flops_to_exit(net, 4)
    assert s.histogram == [0, 0, 0, len(x)]


def test_half_early_exits_on_two_exit_toy():
    net = toy_two_exit()
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]]).reshape(4, 1, 2, 1)
    y = np.array([0, 1, 0, 1])
    s = E.test_accuracy(net, RoutingPolicy((0.5,)), x, y)
    assert s.histogram == [2, 2]
    assert s.avg_mflops == pytest.approx(2.0)
    assert s.saving == pytest.approx(1 / 3)
    # exit 2 predicts argmax(x0, x1): right for [0,1], a tie resolved to class 0 for [0,0]
    assert s.accuracy == pytest.approx(3 / 4)


def test_zero_budget_attack_leaves_accuracy_unchanged(setup):
    net, policy, x, y = setup
    ta = E.test_accuracy(net, policy, x, y)
    zero = Solver("pgd", epsilon=0.0, step_size=0.01, steps=4)
    for form in E.core_forms(4):
        ata = E.adversarial_test_accuracy(net, policy, x, y, form, zero)
        assert ata.accuracy == ta.accuracy
        assert ata.histogram == ta.histogram


def score(acc, n=10):
    return E.Score(acc, 1.0, 0.0, [n, 0])


def test_worst_case_is_minimum_over_core_rows():
    solver = PGD
    accs = [0.9630, 0.9744, 0.9901, 0.9812, 0.9675]
    forms = [AttackForm.single(1), AttackForm.single(2), AttackForm.single(3), AttackForm.average(), AttackForm.max_average()]
    cells = [E.Cell(f, solver, True, f.label(3), score(a)) for f, a in zip(forms, accs)]
    cells.append(E.Cell(AttackForm.random(0), solver, False, "Random", score(0.5)))
    rep = E.EvalReport(2, 1.0, score(0.99), cells)
    assert rep.ata_worst_case == 0.9630
    rep.check()
    assert "96.30%" in E.render_table({"m": rep}).splitlines()[-3]


def test_report_check_catches_bad_histogram():
    rep = E.EvalReport(2, 1.0, score(0.9), [E.Cell(AttackForm.single(1), PGD, True, "x", E.Score(0.5, 1.0, 0.0, [3, 4]))])
    with pytest.raises(E.ReportIntegrityError):
        rep.check(10)
    rep = E.EvalReport(2, 1.0, E.Score(0.9, 2.0, -1.0, [10, 0]))
    with pytest.raises(E.ReportIntegrityError):
        rep.check(10)


def test_core_rows_count_and_single_form(setup):
    net, policy, x, y = setup
    rep = E.cross_matrix(net, policy, x, y, PGD)
    assert [c.label for c in rep.cells] == ["Branch1", "Branch2", "Branch3", "Main Branch", "Average", "Max-Average"]
    assert all(c.core for c in rep.cells)
    one = E.cross_matrix(net, policy, x, y, PGD, forms=[AttackForm.single(2)])
    assert len(one.cells) == 1 and one.ata_worst_case == one.cells[0].score.accuracy


def test_smallcnn_sized_net_has_five_core_rows():
    assert len(E.core_forms(3)) == 5


def test_cross_matrix_single_rows_match_standalone_attacks(setup):
    net, policy, x, y = setup
    rep = E.cross_matrix(net, policy, x, y, PGD, chunk=5)
    for c in rep.cells:
        alone = E.adversarial_test_accuracy(net, policy, x, y, c.form, PGD, chunk=5)
        assert alone.accuracy == c.score.accuracy and alone.histogram == c.score.histogram


def test_report_is_deterministic_and_worker_independent(setup):
    net, policy, x, y = setup
    extra = [(AttackForm.random(4), PGD)]
    a = E.cross_matrix(net, policy, x, y, PGD, extra=extra, chunk=4, workers=1)
    b = E.cross_matrix(net, policy, x, y, PGD, extra=extra, chunk=4, workers=3)
    c = E.cross_matrix(net, policy, x, y, PGD, extra=extra, chunk=4, workers=1)
    assert a.records() == b.records() == c.records()


def test_failed_cell_is_marked_and_others_survive(setup, monkeypatch):
    net, policy, x, y = setup
    real = E.run_attack

    def flaky(net, form, *args, **kw):
        if form.kind == "random":
            raise FloatingPointError("boom")
        return real(net, form, *args, **kw)

    monkeypatch.setattr(E, "run_attack", flaky)
    rep = E.cross_matrix(net, policy, x, y, PGD, extra=[(AttackForm.random(1), PGD)])
    bad = rep.cells[-1]
    assert bad.failed and "boom" in bad.error
    assert all(not c.failed for c in rep.cells[:-1])
    assert rep.ata_worst_case == min(c.score.accuracy for c in rep.cells[:-1])
    assert rep.records()[-2]["status"] == "failed"
    assert "failed" in E.render_table({"m": rep})


def test_histograms_sum_to_dataset_size(setup):
    net, policy, x, y = setup
    rep = E.cross_matrix(net, policy, x, y, PGD)
    hist = rep.histogram_records()
    for name in {h["dataset"] for h in hist}:
        assert sum(h["count"] for h in hist if h["dataset"] == name) == len(x)


def test_report_round_trip(setup, tmp_path):
    net, policy, x, y = setup
    rep = E.cross_matrix(net, policy, x, y, PGD, extra=[(AttackForm.random(2), PGD)])
    paths = rep.write(tmp_path, "r")
    back = E.EvalReport.read(paths["jsonl"])
    assert back.records() == rep.records()
    table = paths["table"].read_text()
    for row in ("TA", "ATA (Worst-Case)", "Average MFlops", "Computation Saving", "ATA (Max-Average)"):
        assert row in table


def test_table_has_one_column_per_model():
    rep = E.EvalReport(2, 1.0, score(0.9), [E.Cell(AttackForm.single(1), PGD, True, "Branch1", score(0.8))])
    lines = E.render_table({"Standard": rep, "Average": rep}).splitlines()
    assert lines[0].split() == ["Standard", "Average"]
    assert lines[1].split() == ["TA", "90.00%", "90.00%"]


def test_empty_set_rejected(setup):
    net, policy, x, y = setup
    with pytest.raises(ValueError):
        E.test_accuracy(net, policy, x[:0], y[:0])
