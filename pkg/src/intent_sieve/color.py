import ctypes
import sys
from enum import IntEnum


def fix_windows_console():
    """Enable ANSI color codes for cmd.exe."""
    if sys.platform == "win32":
        kernel = ctypes.windll.kernel32  # type: ignore[attr-defined]
        for handle in (-11, -12):  # stdout, stderr
            kernel.SetConsoleMode(kernel.GetStdHandle(handle), 7)


def supports_color() -> bool:
    is_a_tty_stdout = hasattr(sys.stdout, "isatty") and sys.stdout.isatty()
    is_a_tty_stderr = hasattr(sys.stderr, "isatty") and sys.stderr.isatty()
    return is_a_tty_stdout and is_a_tty_stderr


fix_windows_console()
_supports_color = supports_color()


class AnsiCodes(IntEnum):
    RESET = 0
    BOLD = 1
    DIM = 2
    FG_RED = 31
    FG_GREEN = 32
    FG_YELLOW = 33
    FG_CYAN = 36
    FG_DEFAULT = 39

    def __str__(self) -> str:
        return f"\033[{self.value!s}m"


def colored(text: str, *codes: AnsiCodes, force_color: bool = False) -> str:
    """Apply ANSI color codes to `text` if the terminal supports them."""
    if _supports_color or force_color:
        return "".join((*map(str, codes), text, str(AnsiCodes.RESET)))
    return text


# lower bound of each band, checked in order
SCORE_BANDS = (
    (0.85, AnsiCodes.FG_GREEN),
    (0.6, AnsiCodes.FG_CYAN),
    (0.0, AnsiCodes.FG_RED),
)


def score_color(score: float) -> AnsiCodes:
    return next((code for bound, code in SCORE_BANDS if score >= bound), AnsiCodes.FG_RED)


def colored_score(score: float, *, force_color: bool = False) -> str:
    """Format a score in [0, 1] with four decimals, colored by band."""
    return colored(f"{score:.4f}", score_color(score), force_color=force_color)
