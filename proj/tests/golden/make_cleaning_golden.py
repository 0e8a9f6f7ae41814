#!/usr/bin/env python3
"""Regenerate cleaning.jsonl: raw inputs below, expected output from a
regex implementation of the spacing rules that shares no code with the
C++ cleaner. Works on bytes so only ASCII letters/digits count."""
import json
import re
from pathlib import Path

PUNCT = re.compile(rb"([.,;:?!])(?=[A-Za-z0-9])")
REDACT = re.compile(rb"((?i:xxx))(?=[A-Za-z0-9])")
SPACE = re.compile(rb"[ \t\n\r\f\v]+")


def clean(raw: str) -> str:
    b = raw.encode("utf-8")
    b = PUNCT.sub(rb"\1 ", b)
    b = REDACT.sub(rb"\1 ", b)
    b = SPACE.sub(b" ", b).strip(b" ")
    return b.decode("utf-8")


CASES = [
    ("whitespace", "a b  c"),
    ("mixed", "stated:he left.xxxwas seen"),
    ("already_clean", "xxx spoke with officers."),
    ("period", "He left.She stayed."),
    ("comma", "red,blue,green"),
    ("semicolon", "one;two;three"),
    ("colon", "Time:2300 hours"),
    ("question", "Why?Because."),
    ("exclamation", "Stop!Police!"),
    ("digit_after_punct", "Unit 4.5 responded,2 officers"),
    ("decimal_number", "BAC was 0.08 at scene"),
    ("punct_then_space", "He left. She stayed."),
    ("punct_then_punct", "Wait...what?!"),
    ("ellipsis_then_letter", "and then...he ran"),
    ("punct_at_end", "End of report."),
    ("punct_then_quote", 'He said "stop."Then left'),
    ("punct_then_paren", "Officers arrived.(see notes)"),
    ("redaction_upper", "XXXwas observed"),
    ("redaction_mixed_case", "xXxstated he lived nearby"),
    ("redaction_then_digit", "xxx123 Main St"),
    ("redaction_then_space", "xxx was there"),
    ("redaction_end", "Spoke with xxx"),
    ("redaction_run_4", "xxxxwas"),
    ("redaction_run_6", "xxxxxx"),
    ("redaction_inside_word", "Exxxon station"),
    ("redaction_then_punct", "xxx.He left"),
    ("punct_then_redaction", "Arrived.xxxleft"),
    ("double_redaction", "xxxandxxxwere stopped"),
    ("tabs", "a\tb\t\tc"),
    ("newlines", "line one\nline two\r\nline three"),
    ("leading_trailing", "   padded text   "),
    ("only_spaces", "     "),
    ("empty", ""),
    ("vertical_tab_formfeed", "a\x0bb\x0cc"),
    ("mixed_runs", "a \t \n b"),
    ("no_case_change", "MiXeD CaSe,StAyS"),
    ("non_ascii_letter_after_punct", "café.Été later"),
    ("non_ascii_before_punct", "naïve.next"),
    ("nbsp_preserved", "a b"),
    ("curly_quote_after_punct", "said.“hello”"),
    ("hyphen_after_punct", "left.-ran"),
    ("slash_after_punct", "and/or.b/c"),
    ("url_like", "see www.example.com"),
    ("time_colon", "at 12:30pm"),
    ("multiple_rules", "  xxxstated:he was,at xxx.He   left!  "),
    ("idempotent_spaced", "He left. She stayed, then went; it was: fine? yes! ok"),
    ("idempotent_redaction", "xxx was xxx and xxx"),
    ("long_run_spaces", "a" + " " * 40 + "b"),
    ("newline_after_punct", "Left.\nReturned."),
    ("narrative", "ON 1/2/2019 OFFICERS OBSERVED XXXSITTING IN CAR.DRIVER STATED:HE WAS WAITING FOR A FRIEND,NO FURTHER ACTION."),
]

assert len(CASES) == 50 and len({n for n, _ in CASES}) == 50
out = Path(__file__).with_name("cleaning.jsonl")
with out.open("w", encoding="utf-8") as f:
    for name, raw in CASES:
        f.write(json.dumps({"name": name, "raw": raw, "clean": clean(raw)}, ensure_ascii=False) + "\n")
