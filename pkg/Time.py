import time


class Time:
    def __init__(self):
        """Stopwatch used to report how long each pipeline stage took."""
        self.timer = 0.0

    def reset_timer(self) -> None:
        self.timer = time.perf_counter()

    def get_time(self) -> float:
        return time.perf_counter() - self.timer
