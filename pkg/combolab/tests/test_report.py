import json

from combolab.report import (
    PROVENANCE_BANNER,
    format_loss_table,
    format_metrics,
    loss_table_payload,
    read_history,
    write_history,
    write_json_report,
)
from combolab.train import EpochRecord, LossRow, MetricsReport

ROWS = [
    LossRow("mse", "MSE Loss", MetricsReport(0.25, 0.31, 0.88, 40), []),
    LossRow("combo", "ComboLoss", MetricsReport(0.2, 0.27, None, 40), []),
]

HISTORY = [
    EpochRecord(0, 0.01, 2.5, {"reg": 1.0, "exp": 0.5, "cls": 1.0}),
    EpochRecord(1, 0.01, 1.75, {"reg": 0.75, "exp": 0.25, "cls": 0.75}),
]


def test_json_report_carries_banner_and_sorted_keys(tmp_path):
    path = write_json_report(tmp_path / "r.json", {"zeta": 1, "alpha": [1, 2]})
    text = path.read_text()
    assert json.loads(text)["provenance"] == PROVENANCE_BANNER
    assert text.index('"alpha"') < text.index('"provenance"') < text.index('"zeta"')


def test_metrics_line_marks_undefined_pc():
    assert format_metrics(ROWS[1].metrics) == "MAE=0.2000 RMSE=0.2700 PC=undef (n=40)"


def test_loss_table_layout():
    table = format_loss_table(ROWS)
    lines = table.splitlines()
    assert lines[0] == PROVENANCE_BANNER
    assert lines[2].split() == ["Loss", "Function", "MAE", "RMSE", "PC"]
    assert lines[4].split() == ["MSE", "Loss", "0.2500", "0.3100", "0.8800"]
    assert "0.2126" in table and "0.9117" in table
    assert "0.2126" not in format_loss_table(ROWS, with_reference=False)


def test_loss_table_payload_rows():
    payload = loss_table_payload(ROWS)
    assert [r["loss"] for r in payload["rows"]] == ["mse", "combo"]
    assert payload["rows"][1]["pc"] is None
    assert payload["published_reference"]["combo"] == {"mae": 0.2126, "rmse": 0.2813, "pc": 0.9117}


def test_history_lines_have_no_timestamps(tmp_path):
    path = write_history(tmp_path / "h.jsonl", HISTORY, fold=2)
    records = read_history(path)
    assert len(records) == 2
    assert records[1] == {"message": "epoch", "fold": 2, "epoch": 1, "lr": 0.01, "loss": 1.75,
                          "parts": {"cls": 0.75, "exp": 0.25, "reg": 0.75}}
    assert not any("asctime" in r or "time" in r for r in records)


def test_history_files_are_byte_identical(tmp_path):
    a = write_history(tmp_path / "a.jsonl", HISTORY, loss_name="combo")
    b = write_history(tmp_path / "b.jsonl", HISTORY, loss_name="combo")
    assert a.read_bytes() == b.read_bytes()


def test_history_does_not_leak_into_other_files(tmp_path):
    first = write_history(tmp_path / "first.jsonl", HISTORY[:1])
    write_history(tmp_path / "second.jsonl", HISTORY)
    assert len(read_history(first)) == 1
