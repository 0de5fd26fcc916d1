"""Smoke test for the m2m_py extension.

Build and install first:

    cd crates/py && maturin develop --release
    python python/smoke_test.py
"""

import json
import math
import pathlib
import re
import tempfile

import m2m_py

FIXTURES = pathlib.Path(__file__).resolve().parents[2] / "core" / "fixtures"


def check_numerics():
    for out_gain, in_gain in m2m_py.overlap_gains(257):
        assert abs(out_gain**2 + in_gain**2 - 1.0) < 1e-12

    a = [0.25] * 1000
    b = [-0.25] * 600
    assert m2m_py.crossfade(a, b, 1000, 0.0) == a + b
    assert len(m2m_py.crossfade(a, b, 1000, 0.2)) == 1400

    f, df1, df2, p = m2m_py.rm_anova([[5, 4, 2], [4, 4, 3], [5, 3, 1], [3, 3, 3]])
    assert abs(f - 147 / 31) < 1e-9 and (df1, df2) == (2.0, 6.0)
    assert 0.0 < p < 1.0

    micro, macro, weighted, accuracy = m2m_py.f1_scores(["a", "b"], [0, 0, 1, 1], [0, 1, 1, 1])
    assert math.isclose(micro, accuracy) and math.isclose(accuracy, 0.75)

    try:
        m2m_py.rm_anova([[1, 2]])
    except ValueError:
        pass
    else:
        raise AssertionError("a one-subject table must be rejected")


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        library, runs = tmp / "library", tmp / "runs"
        book = json.loads(m2m_py.ingest(str(FIXTURES / "books"), "harbor_days", str(library)))
        assert book["book_id"] == "harbor_days"

        config = re.sub(r"(?m)^page_duration_s = .*$", "page_duration_s = 4.0", m2m_py.default_config())
        report = json.loads(m2m_py.run(str(library), "harbor_days", "m2m", str(runs), config, "smoke"))
        assert not report["failed"], report["failed"]
        assert report["manifest"]["final_audio"] == "artifacts/assemble.wav"

        directive = json.loads(m2m_py.artifact(str(runs), "smoke", "directive-s01"))["parsed"]
        directive["text"] = "Solo flute, hushed and searching."
        manifest = json.loads(m2m_py.override_artifact(str(runs), "smoke", "directive-s01", json.dumps(directive)))
        stale = {s["artifact_id"] for s in manifest["stages"] if s["status"] == "stale"}
        assert "caption-s01" in stale and "segment" not in stale

        try:
            m2m_py.override_artifact(str(runs), "smoke", "directive-s01", '{"text": 7}')
        except m2m_py.M2mError as e:
            assert "schema" in str(e)
        else:
            raise AssertionError("invalid payload must be rejected")

        rerun = json.loads(m2m_py.rerun(str(runs), "smoke"))
        assert set(rerun["executed"]) == stale
        again = json.loads(m2m_py.rerun(str(runs), "smoke"))
        assert again["executed"] == [] and again["backend_calls"] == 0


if __name__ == "__main__":
    check_numerics()
    check_pipeline()
    print("m2m_py", m2m_py.__version__, "smoke test passed")
