from enum import IntEnum


class SeverityLevel(IntEnum):
    """Intelligibility subgroup; lower value = more severe impairment."""

    VeryLow = 0
    Low = 1
    Mid = 2
    High = 3

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, text) -> "SeverityLevel":
        if isinstance(text, (int, cls)):
            return cls(int(text))
        key = str(text).strip()
        for level in cls:
            if key in (level.name, level.short, str(int(level))):
                return level
        raise ValueError(f"unknown severity level {text!r}")


_SHORT = {SeverityLevel.VeryLow: "VL", SeverityLevel.Low: "L",
          SeverityLevel.Mid: "M", SeverityLevel.High: "H"}

N_SEVERITIES = len(SeverityLevel)
