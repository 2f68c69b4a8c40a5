"""One-off extraction of the vendored prompt template texts from paper.md.

Pulls the tcolorbox bodies, strips LaTeX markup to plain text, and writes the
four single-paragraph description templates plus the combine and judge
templates under src/styledistill/templates/. Run from the repo root.
"""

from __future__ import annotations

import re
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
PAPER = ROOT / "paper.md"
OUT = ROOT / "src" / "styledistill" / "templates"


def boxes(text: str) -> list[tuple[str, str]]:
    pattern = re.compile(
        r"\\begin\{tcolorbox\}\[[^\]]*title=\{\\textbf\{\\textcolor\{black\}\{(?P<title>[^}]*)\}\}\}\]\n"
        r"(?P<body>.*?)\\end\{tcolorbox\}",
        re.DOTALL,
    )
    return [(m.group("title"), m.group("body")) for m in pattern.finditer(text)]


def detex(body: str) -> str:
    s = body
    s = s.replace("\\begin{itemize}", "").replace("\\end{itemize}", "")
    s = re.sub(r"\\item\s*", "- ", s)
    s = re.sub(r"\\textbf\{([^{}]*)\}", r"\1", s)
    s = re.sub(r"\\textit\{([^{}]*)\}", r"\1", s)
    s = re.sub(r"\\texttt\{([^{}]*)\}", r"\1", s)
    s = s.replace("\\noindent", "")
    s = s.replace("\\%", "%").replace("\\&", "&").replace("\\_", "_")
    s = s.replace("``", '"').replace("''", '"')
    # collapse per-line leading/trailing blanks, keep paragraph breaks
    lines = [ln.strip() for ln in s.split("\n")]
    out: list[str] = []
    for ln in lines:
        if ln == "" and out and out[-1] == "":
            continue
        out.append(ln)
    while out and out[0] == "":
        out.pop(0)
    while out and out[-1] == "":
        out.pop()
    return "\n".join(out) + "\n"


def main() -> None:
    found = dict(boxes(PAPER.read_text(encoding="utf-8")))
    OUT.mkdir(parents=True, exist_ok=True)
    name_map = {
        "Facial Attributes.": "face.txt",
        "Clothes and Accessories.": "attire.txt",
        "Posture.": "pose.txt",
        "Background.": "scene.txt",
        "Combine.": "combine.txt",
        "Prompt.": "judge.txt",
    }
    for title, filename in name_map.items():
        body = detex(found[title])
        (OUT / filename).write_text(body, encoding="utf-8")
        print(f"wrote {filename}: {len(body)} chars")


if __name__ == "__main__":
    main()
