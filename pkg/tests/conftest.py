import numpy as np
import pytest

from strokecomp.skeleton import ActionKind, Dataset, Label, MotionSequence, N_JOINTS


def make_seq(coords=None, label=Label.NC, action=ActionKind.TOUCH_MOUTH, T=6, rng=None, fps=30.0, **kw):
    if coords is None:
        rng = rng or np.random.default_rng(0)
        coords = rng.normal(size=(T, N_JOINTS, 3))
    coords = np.asarray(coords, dtype=np.float64)
    ts = np.arange(len(coords)) / fps
    return MotionSequence(coords, ts, label, action, fps=fps, **kw)


def labelled_dataset(per_class=25, T=6, seed=0):
    rng = np.random.default_rng(seed)
    actions = {Label.NC: ActionKind.TOUCH_MOUTH, Label.TLF: ActionKind.TOUCH_MOUTH,
               Label.TR: ActionKind.EXTEND_BACKWARD, Label.SE: ActionKind.ARM_ABDUCTION}
    seqs = []
    for lab in Label:
        for r in range(per_class):
            seqs.append(make_seq(rng=rng, T=T, label=lab, action=actions[lab],
                                 subject_id=f"S{r % 5:02d}", repetition=r))
    return Dataset(seqs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# filled by test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
