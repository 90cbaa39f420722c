import os

import torch

# reproducible CPU timing and bitwise-identical reruns
torch.set_num_threads(int(os.environ.get("CGPDNET_THREADS", "1")))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
