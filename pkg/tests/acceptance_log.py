"""Shared pass/fail record for the acceptance criteria, printed at the end of a pytest run."""

TITLES = {
    1: "metric oracle",
    2: "gendered bias vs same-gender split baseline",
    3: "full-mediation exactness",
    4: "clamp-oracle recovery for every layer prefix",
    5: "|IE| non-decreasing in mediator depth",
    6: "combined interventions aligned and sub-additive",
    7: "module ordering follows injection strength",
    8: "mitigation ordering, cancellation and AP",
    9: "byte-identical reruns and thread independence",
    10: "acceptance suite time budget",
}

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)


def lines() -> list[str]:
    out = []
    for n, title in TITLES.items():
        if n in RESULTS:
            ok, detail = RESULTS[n]
            out.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        else:
            out.append(f"criterion {n:2d} NOT RUN: {title}")
    return out
