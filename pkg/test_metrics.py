"""Tests for FCP, its extended variant, L2 and the trajectory log files."""

import json

import numpy as np
import pytest

from errors import ConfigurationError, FormatError, InvalidInputError
from metrics import (
    ClipLog,
    Command,
    ComplianceRules,
    TrajectoryFrame,
    TrajectoryLog,
    evaluate_log,
    fcp,
    fcp_avg,
    fcp_extended,
    fcp_extended_per_clip,
    fcp_per_clip,
    l2_error,
    parse_clip_line,
    read_trajectory_log,
    write_metrics_csv,
    write_trajectory_log,
)


def _clip(errors, command=Command.GO_STRAIGHT, laterals=None):
    laterals = laterals if laterals is not None else [0.0] * len(errors)
    frames = [TrajectoryFrame(pred_3s=(float(e), 0.0), gt_3s=(0.0, 0.0), lateral_3s=lat) for e, lat in zip(errors, laterals)]
    return ClipLog(command=command, frames=frames)


def _log(*clips):
    return TrajectoryLog(clips=list(clips))


def _random_log(rng, clips=5):
    return _log(*[_clip(rng.uniform(0, 1.2, size=int(rng.integers(1, 12)))) for _ in range(clips)])


# ----- fcp -------------------------------------------------------------------------------------


def test_all_correct_is_zero():
    assert fcp(_log(_clip([0.1, 0.0, 0.2])), 0.5) == 0.0


def test_three_late_frames():
    assert fcp(_log(_clip([0.9, 0.7, 0.6, 0.1, 0.8])), 0.5) == 3.0


def test_never_correct_saturates():
    assert fcp_per_clip(_log(_clip([1.0] * 10)), 0.5) == [10]


def test_fcp_is_the_mean_over_clips():
    log = _log(_clip([0.9, 0.1]), _clip([0.9, 0.9, 0.9, 0.1]))
    assert fcp(log, 0.5) == 2.0


def test_error_on_threshold_counts_as_miss():
    assert fcp_per_clip(_log(_clip([0.5, 0.2])), 0.5) == [1]


def test_fcp_matches_first_correct_scan():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        errors = rng.uniform(0, 1.2, size=int(rng.integers(1, 12)))
        correct = np.nonzero(errors < 0.5)[0]
        expected = int(correct[0]) if correct.size else len(errors)
        assert fcp_per_clip(_log(_clip(errors)), 0.5) == [expected]


def test_fcp_monotone_in_threshold():
    rng = np.random.default_rng(1)
    for _ in range(200):
        log = _random_log(rng)
        low, high = fcp(log, 0.25), fcp(log, 0.75)
        assert low >= fcp_avg(log) >= high
        assert low >= fcp(log, 0.5) >= high


def test_fcp_bounded_by_clip_length():
    rng = np.random.default_rng(2)
    log = _random_log(rng, clips=50)
    for clip, count in zip(log.clips, fcp_per_clip(log, 0.5)):
        assert 0 <= count <= len(clip.frames)


def test_fcp_invariant_under_clip_order_and_duplication():
    rng = np.random.default_rng(3)
    log = _random_log(rng)
    assert fcp(_log(*reversed(log.clips)), 0.5) == pytest.approx(fcp(log, 0.5))
    assert fcp(_log(*(log.clips * 2)), 0.5) == pytest.approx(fcp(log, 0.5))


def test_single_threshold_average():
    log = _log(_clip([0.9, 0.3, 0.1]))
    assert fcp_avg(log, [0.5]) == fcp(log, 0.5)


def test_all_correct_average_is_zero():
    assert fcp_avg(_log(_clip([0.0, 0.0]))) == 0.0


def test_empty_threshold_set():
    with pytest.raises(ConfigurationError):
        fcp_avg(_log(_clip([0.0])), [])


def test_nonpositive_threshold():
    with pytest.raises(ConfigurationError):
        fcp(_log(_clip([0.0])), 0.0)


def test_empty_log():
    with pytest.raises(InvalidInputError):
        fcp(TrajectoryLog(), 0.5)


def test_missing_ground_truth_names_clip():
    clip = ClipLog(command=Command.GO_STRAIGHT, frames=[TrajectoryFrame(pred_3s=(0.0, 0.0), lateral_3s=0.0)])
    with pytest.raises(InvalidInputError, match="clip 1 frame 1"):
        fcp(_log(_clip([0.0]), clip), 0.5)


# ----- extended fcp ---------------------------------------------------------------------------------


def test_compliant_from_first_frame():
    clip = _clip([0.0] * 4, Command.TURN_RIGHT, laterals=[3.0] * 4)
    for q in (1, 2, 3):
        assert fcp_extended(_log(clip), q) == 0.0


def test_five_noncompliant_frames_q2():
    clip = _clip([0.0] * 8, Command.TURN_RIGHT, laterals=[0.0] * 5 + [3.0] * 3)
    assert fcp_extended_per_clip(_log(clip), 2) == [3]


def test_never_compliant_q3():
    clip = _clip([0.0] * 10, Command.TURN_LEFT, laterals=[0.0] * 10)
    assert fcp_extended(_log(clip), 3) == 7.0


def test_compliance_rules():
    rules = ComplianceRules()
    assert rules.complies(Command.TURN_RIGHT, 2.5)
    assert not rules.complies(Command.TURN_RIGHT, 1.0)
    assert rules.complies(Command.TURN_LEFT, -2.5)
    assert rules.complies(Command.GO_STRAIGHT, -1.0)
    assert not rules.complies(Command.GO_STRAIGHT, 3.0)


def test_extended_needs_no_ground_truth():
    frames = [TrajectoryFrame(pred_3s=(0.0, 0.0), lateral_3s=0.0) for _ in range(3)]
    assert fcp_extended(_log(ClipLog(command=Command.TURN_RIGHT, frames=frames)), 1) == 2.0


def test_extended_missing_lateral():
    clip = ClipLog(command=Command.GO_STRAIGHT, frames=[TrajectoryFrame(pred_3s=(0.0, 0.0))])
    with pytest.raises(InvalidInputError, match="lateral"):
        fcp_extended(_log(clip), 1)


def test_extended_rejects_q_below_one():
    with pytest.raises(ConfigurationError):
        fcp_extended(_log(_clip([0.0])), 0)


# ----- l2 ---------------------------------------------------------------------------------------------


def _horizon_frame(offset, gt=(1.0, 2.0)):
    values = {}
    for h in (1, 2, 3):
        values[f"gt_{h}s"] = gt
        values[f"pred_{h}s"] = (gt[0] + offset[0], gt[1] + offset[1])
    return TrajectoryFrame(lateral_3s=0.0, **values)


def test_l2_zero_when_exact():
    report = l2_error(_log(ClipLog(command=Command.GO_STRAIGHT, frames=[_horizon_frame((0.0, 0.0))] * 3)))
    assert report.per_horizon == {1: 0.0, 2: 0.0, 3: 0.0}
    assert report.average == 0.0


def test_l2_constant_offset():
    report = l2_error(_log(ClipLog(command=Command.GO_STRAIGHT, frames=[_horizon_frame((0.6, 0.8))] * 4)))
    for value in report.per_horizon.values():
        assert value == pytest.approx(1.0, abs=1e-12)
    assert report.average == pytest.approx(1.0, abs=1e-12)


def test_l2_matches_per_frame_oracle():
    rng = np.random.default_rng(4)
    clips = []
    for _ in range(4):
        frames = [_horizon_frame(tuple(rng.normal(size=2)), tuple(rng.normal(size=2))) for _ in range(5)]
        clips.append(ClipLog(command=Command.GO_STRAIGHT, frames=frames))
    log = _log(*clips)
    for h in (1, 2, 3):
        distances = []
        for clip in log.clips:
            for frame in clip.frames:
                pred, gt = frame.prediction(h), frame.ground_truth(h)
                distances.append(((pred[0] - gt[0]) ** 2 + (pred[1] - gt[1]) ** 2) ** 0.5)
        assert l2_error(log).per_horizon[h] == pytest.approx(sum(distances) / len(distances), abs=1e-12)


def test_l2_missing_horizon():
    with pytest.raises(InvalidInputError, match="1s"):
        l2_error(_log(_clip([0.0])))


# ----- files -------------------------------------------------------------------------------------------


def test_parse_clip_line():
    line = json.dumps({"command": "TurnRight", "frames": [{"pred_3s": [1, 2], "gt_3s": [1, 2], "lateral_3s": 2.5}]})
    clip = parse_clip_line(line, 1)
    assert clip.command == Command.TURN_RIGHT
    assert clip.frames[0].pred_3s == (1.0, 2.0)


def test_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "log.jsonl"
    good = json.dumps({"command": "GoStraight", "frames": [{"pred_3s": [0, 0], "gt_3s": [0, 0], "lateral_3s": 0}]})
    path.write_text(good + "\n{not json\n")
    with pytest.raises(FormatError, match="line 2"):
        read_trajectory_log(path)


def test_unknown_command_rejected():
    with pytest.raises(FormatError, match="line 3"):
        parse_clip_line(json.dumps({"command": "UTurn", "frames": [{"pred_3s": [0, 0]}]}), 3)


def test_empty_clip_rejected():
    with pytest.raises(FormatError):
        parse_clip_line(json.dumps({"command": "GoStraight", "frames": []}), 1)


def test_missing_log_file(tmp_path):
    with pytest.raises(FormatError, match="not found"):
        read_trajectory_log(tmp_path / "absent.jsonl")


def test_log_file_keeps_clips(tmp_path):
    log = _log(_clip([0.9, 0.1], Command.TURN_LEFT, laterals=[-3.0, -1.0]), _clip([0.2]))
    restored = read_trajectory_log(write_trajectory_log(log, tmp_path / "log.jsonl"))
    assert restored == log


def test_metric_rows_and_csv(tmp_path):
    frames = [_horizon_frame((0.0, 0.0)) for _ in range(3)]
    log = _log(ClipLog(command=Command.GO_STRAIGHT, frames=frames))
    rows = evaluate_log(log)
    names = [(row.metric, row.threshold_or_q) for row in rows]
    block = [
        ("fcp", "0.25"),
        ("fcp", "0.5"),
        ("fcp", "0.75"),
        ("fcp_avg", "0.25+0.5+0.75"),
        ("fcp_extended", "1"),
        ("fcp_extended", "2"),
        ("fcp_extended", "3"),
        ("l2", "1s"),
        ("l2", "2s"),
        ("l2", "3s"),
        ("l2", "avg"),
    ]
    assert names == block + [(f"{metric}:GoStraight", key) for metric, key in block]
    assert all(row.value == 0.0 for row in rows)

    path = write_metrics_csv(rows, tmp_path / "metrics.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "metric,threshold_or_q,value"
    assert lines[1] == "fcp,0.25,0.0"
    assert len(lines) == len(rows) + 1


def test_three_second_only_log_still_reports_fcp(caplog):
    rows = evaluate_log(_log(_clip([0.9, 0.7, 0.6, 0.1])))
    values = {(row.metric, row.threshold_or_q): row.value for row in rows}
    assert values[("fcp", "0.5")] == 3.0
    assert values[("l2", "3s")] == pytest.approx((0.9 + 0.7 + 0.6 + 0.1) / 4)
    assert ("l2", "1s") not in values and ("l2", "2s") not in values
    assert "[1, 2]" in caplog.text


def test_no_shared_horizon_skips_l2():
    frames = [TrajectoryFrame(pred_3s=(0.0, 0.0), gt_3s=(0.0, 0.0), lateral_3s=0.0, pred_1s=(0.0, 0.0))]
    log = _log(ClipLog(command=Command.GO_STRAIGHT, frames=frames), _clip([0.2]))
    rows = evaluate_log(log, horizons=[1, 2])
    assert not any(row.metric.startswith("l2") for row in rows)
    assert rows[0].metric == "fcp"


def test_rows_per_command():
    log = _log(
        _clip([0.9, 0.1], Command.TURN_LEFT, laterals=[-3.0, -3.0]),
        _clip([0.9, 0.9, 0.9, 0.1]),
        _clip([0.1]),
    )
    values = {(row.metric, row.threshold_or_q): row.value for row in evaluate_log(log)}
    assert values[("fcp:TurnLeft", "0.5")] == 1.0
    assert values[("fcp:GoStraight", "0.5")] == 1.5
    assert values[("fcp", "0.5")] == pytest.approx(4 / 3)
    assert ("fcp:TurnRight", "0.5") not in values


def test_average_is_exact_over_integer_counts():
    log = _log(_clip([0.3, 0.3, 0.1]), _clip([0.6, 0.6, 0.3, 0.1]), _clip([0.9, 0.1]))
    counts = sum(sum(fcp_per_clip(log, t)) for t in (0.25, 0.5, 0.75))
    assert fcp_avg(log) == counts / 9
    assert fcp(log, 0.25) >= fcp_avg(log) >= fcp(log, 0.75)


def test_extended_monotone_in_q():
    rng = np.random.default_rng(5)
    for _ in range(200):
        clips = []
        for _ in range(4):
            length = int(rng.integers(1, 12))
            command = list(Command)[int(rng.integers(0, 3))]
            clips.append(_clip([0.0] * length, command, laterals=list(rng.uniform(-4, 4, size=length))))
        values = [fcp_extended(_log(*clips), q) for q in (1, 2, 3, 4)]
        assert all(a >= b for a, b in zip(values, values[1:]))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
