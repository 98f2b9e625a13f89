import pytest

from fedselect.vrf import SecurityParams, vrf_gen


STRICT = SecurityParams(kappa=128, strict=True, rsa_bits=1024)
SIM = SecurityParams(kappa=64, strict=False)


@pytest.fixture(scope="session")
def strict_params():
    return STRICT


@pytest.fixture(scope="session")
def sim_params():
    return SIM


@pytest.fixture(scope="session")
def strict_keys():
    return [vrf_gen(STRICT, b"strict-%d" % i) for i in range(4)]


# -- acceptance criteria summary ------------------------------------------------

_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = ", ".join(f"{k}={v}" for k, v in item.user_properties)
        _ACCEPTANCE[m.args[0]] = (m.args[1], rep.passed, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, dur, detail = _ACCEPTANCE[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title} [{dur:.1f}s]"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
