#!/usr/bin/env python3
"""Regenerate fixtures/replay_trace.jsonl and fixtures/expected_report.json.

Drives the full engine once with a scripted planner (hand-written plans
for the 20 fixture questions, including deliberate failures), recording
every LLM exchange keyed by prompt fingerprint.  Then replays the trace
and freezes the resulting report.  Run this after any change to prompt
templates, fixtures, or tool feedback text:

    python3 scripts/record_trace.py
"""

import os
import re
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

# the sandbox runs as a child process and must be importable there too
_sandbox_src = str(REPO / "sandbox" / "src")
if _sandbox_src not in os.environ.get("PYTHONPATH", "").split(os.pathsep):
    os.environ["PYTHONPATH"] = _sandbox_src + os.pathsep + os.environ.get("PYTHONPATH", "")

from ehragent.debugger import DEBUG_SYSTEM  # noqa: E402
from ehragent.evalharness import evaluate, load_dataset, trace_id_of  # noqa: E402
from ehragent.gateway import RecordingBackend, ReplayBackend  # noqa: E402
from ehragent.knowledge import KNOWLEDGE_SYSTEM  # noqa: E402
from ehragent.memory import MemoryStore  # noqa: E402
from ehragent.orchestrator import AgentConfig, Demonstration  # noqa: E402
from ehragent.store import load_database  # noqa: E402

FIXTURES = REPO / "fixtures"

import json  # noqa: E402


def fenced(code: str, prose: str = "") -> str:
    block = f"```python\n{code}\n```"
    return f"{prose}\n{block}" if prose else block


# Hand-written plans per question; each list holds the planner replies in
# turn order.  Failures are deliberate: q04/q10/q15 recover after one bad
# attempt, q12 answers confidently with buggy logic, q17 gives up after
# empty SQL results, q20 burns the whole step budget on a missing table.
SCENARIOS = {
    "q01": [
        fenced(
            "patients = LoadDB('patients')\n"
            "females = FilterDB(patients, 'GENDER=F')\n"
            "print(GetValue(females, 'SUBJECT_ID, count'))",
            "Count the rows of patients with GENDER=F.",
        ),
        "The database holds 2 female patients.\n\nANSWER: 2\nTERMINATE",
    ],
    "q02": [
        fenced(
            "admissions = LoadDB('admissions')\n"
            "print(GetValue(admissions, 'HADM_ID, count'))",
            "Count admission rows.",
        ),
        "ANSWER: 7\nTERMINATE",
    ],
    "q03": [
        fenced(
            "rx = LoadDB('prescriptions')\n"
            "drugs = GetValue(rx, 'DRUG')\n"
            "print(len(set(drugs)))",
            "Collect the DRUG column and count distinct names.",
        ),
        "ANSWER: 5\nTERMINATE",
    ],
    "q04": [
        fenced(
            "adm = LoadDB('admissions')\n"
            "emergency = FilterDB(adm, 'ADMTYPE=EMERGENCY')\n"
            "print(GetValue(emergency, 'HADM_ID, count'))",
            "Filter admissions on the type column.",
        ),
        fenced(
            "adm = LoadDB('admissions')\n"
            "emergency = FilterDB(adm, 'ADMISSION_TYPE=EMERGENCY')\n"
            "print(GetValue(emergency, 'HADM_ID, count'))",
            "The column is named ADMISSION_TYPE; retrying.",
        ),
        "ANSWER: 4\nTERMINATE",
    ],
    "q05": [
        fenced(
            "rows = SQLInterpreter(\"SELECT ADMITTIME FROM admissions "
            "WHERE SUBJECT_ID = 28020 ORDER BY ADMITTIME DESC LIMIT 1\")\n"
            "print(rows[0][0])",
            "Sort that patient's admissions by time, newest first.",
        ),
        "ANSWER: 2105-12-10 13:05:00\nTERMINATE",
    ],
    "q06": [
        fenced(
            "rows = SQLInterpreter(\"SELECT ADMITTIME FROM admissions "
            "WHERE SUBJECT_ID = 10006 ORDER BY ADMITTIME ASC LIMIT 1\")\n"
            "print(rows[0][0])",
        ),
        "ANSWER: 2104-08-05 10:15:00\nTERMINATE",
    ],
    "q07": [
        fenced(
            "codes = SQLInterpreter(\"SELECT ICD9_CODE FROM d_icd_procedures "
            "WHERE SHORT_TITLE = 'Temporary tracheostomy'\")\n"
            "procedures = LoadDB('procedures_icd')\n"
            "matched = FilterDB(procedures, 'ICD9_CODE=' + codes[0][0])\n"
            "subjects = GetValue(matched, 'SUBJECT_ID')\n"
            "print(len(set(subjects)))",
            "Look up the procedure code, then count distinct patients.",
        ),
        "ANSWER: 2\nTERMINATE",
    ],
    "q08": [
        fenced(
            "rows = SQLInterpreter(\"SELECT COUNT(DISTINCT procedures_icd.SUBJECT_ID) "
            "FROM procedures_icd JOIN d_icd_procedures "
            "ON procedures_icd.ICD9_CODE = d_icd_procedures.ICD9_CODE "
            "WHERE d_icd_procedures.SHORT_TITLE = 'Venous cath NEC'\")\n"
            "print(rows[0][0])",
        ),
        "ANSWER: 2\nTERMINATE",
    ],
    "q09": [
        fenced(
            "rows = SQLInterpreter(\"SELECT COUNT(*) FROM admissions JOIN patients "
            "ON admissions.SUBJECT_ID = patients.SUBJECT_ID "
            "WHERE patients.GENDER = 'F'\")\n"
            "print(rows[0][0])",
        ),
        "ANSWER: 3\nTERMINATE",
    ],
    "q10": [
        fenced(
            "rx = LoadDB('prescriptions')\n"
            "morphine = FilterDB(rx, 'DRUG~morphine')\n"
            "print(GetValue(morphine, 'SUBJECT_ID'))",
            "Filter prescriptions for morphine.",
        ),
        fenced(
            "rx = LoadDB('prescriptions')\n"
            "morphine = FilterDB(rx, 'DRUG=morphine')\n"
            "sid = GetValue(morphine, 'SUBJECT_ID')[0]\n"
            "patient = FilterDB(LoadDB('patients'), 'SUBJECT_ID=' + str(sid))\n"
            "print(GetValue(patient, 'GENDER')[0])",
            "The condition operator must be '='; retrying.",
        ),
        "ANSWER: F\nTERMINATE",
    ],
    "q11": [
        fenced(
            "rx = LoadDB('prescriptions')\n"
            "heparin = FilterDB(rx, 'DRUG=heparin')\n"
            "big_dose = FilterDB(heparin, 'DOSE_VAL_RX=7500')\n"
            "hadm = GetValue(big_dose, 'HADM_ID')[0]\n"
            "admission = FilterDB(LoadDB('admissions'), 'HADM_ID=' + str(hadm))\n"
            "print(GetValue(admission, 'INSURANCE')[0])",
            "Find the 7500-unit heparin order, then its admission.",
        ),
        "ANSWER: Medicaid\nTERMINATE",
    ],
    "q12": [
        fenced(
            "adm = LoadDB('admissions')\n"
            "rx = LoadDB('prescriptions')\n"
            "admitted = set(GetValue(adm, 'SUBJECT_ID'))\n"
            "prescribed = set(GetValue(rx, 'HADM_ID'))\n"
            "print(len(admitted & prescribed))",
            "Intersect the identifier sets from both tables.",
        ),
        "ANSWER: 0\nTERMINATE",
    ],
    "q13": [
        fenced(
            "rows = SQLInterpreter(\"SELECT admissions.INSURANCE FROM d_icd_procedures "
            "JOIN procedures_icd ON d_icd_procedures.ICD9_CODE = procedures_icd.ICD9_CODE "
            "JOIN admissions ON procedures_icd.HADM_ID = admissions.HADM_ID "
            "WHERE d_icd_procedures.SHORT_TITLE = 'Spinal tap'\")\n"
            "print(rows[0][0])",
            "Join the code dictionary to procedures to admissions.",
        ),
        "ANSWER: Medicare\nTERMINATE",
    ],
    "q14": [
        fenced(
            "code_rows = SQLInterpreter(\"SELECT ICD9_CODE FROM d_icd_procedures "
            "WHERE SHORT_TITLE = 'Insert endotracheal tube'\")\n"
            "procedures = FilterDB(LoadDB('procedures_icd'), 'ICD9_CODE=' + code_rows[0][0])\n"
            "sid = GetValue(procedures, 'SUBJECT_ID')[0]\n"
            "rx = FilterDB(LoadDB('prescriptions'), 'SUBJECT_ID=' + str(sid))\n"
            "drugs = sorted(set(GetValue(rx, 'DRUG')))\n"
            "print(', '.join(drugs))",
        ),
        "ANSWER: aspirin ec, insulin\nTERMINATE",
    ],
    "q15": [
        fenced(
            "females = FilterDB(LoadDB('patients'), 'GENDER=f')\n"
            "print(GetValue(females, 'SUBJECT_ID, count'))",
            "Filter female patients first.",
        ),
        fenced(
            "procedures = FilterDB(LoadDB('procedures_icd'), 'ICD9_CODE=311')\n"
            "subjects = set(GetValue(procedures, 'SUBJECT_ID'))\n"
            "patients = LoadDB('patients')\n"
            "count = 0\n"
            "for sid in sorted(subjects):\n"
            "    row = FilterDB(patients, 'SUBJECT_ID=' + str(sid))\n"
            "    if GetValue(row, 'GENDER')[0] == 'F':\n"
            "        count = count + 1\n"
            "print(count)",
            "GENDER values are uppercase; checking tracheostomy patients one by one.",
        ),
        "ANSWER: 2\nTERMINATE",
    ],
    "q16": [
        fenced(
            "rows = SQLInterpreter(\"SELECT patients.GENDER FROM d_icd_procedures "
            "JOIN procedures_icd ON d_icd_procedures.ICD9_CODE = procedures_icd.ICD9_CODE "
            "JOIN patients ON procedures_icd.SUBJECT_ID = patients.SUBJECT_ID "
            "WHERE d_icd_procedures.ICD9_CODE = '9671'\")\n"
            "print(rows[0][0])",
        ),
        "ANSWER: M\nTERMINATE",
    ],
    "q17": [
        fenced(
            "rows = SQLInterpreter(\"SELECT DRUG FROM prescriptions WHERE ROUTE = 'oral'\")\n"
            "print(len(rows))",
            "Select oral-route prescriptions.",
        ),
        fenced(
            "rows = SQLInterpreter(\"SELECT DRUG FROM prescriptions WHERE ROUTE = 'Oral'\")\n"
            "print(len(rows))",
            "Perhaps the route value is capitalized.",
        ),
        "I cannot locate oral-route prescriptions in this database. TERMINATE",
    ],
    "q18": [
        fenced(
            "catheter = FilterDB(LoadDB('procedures_icd'), 'ICD9_CODE=3893')\n"
            "subjects = set(GetValue(catheter, 'SUBJECT_ID'))\n"
            "emergency = FilterDB(LoadDB('admissions'), 'ADMISSION_TYPE=EMERGENCY')\n"
            "rx = LoadDB('prescriptions')\n"
            "drugs = set()\n"
            "for sid in sorted(subjects):\n"
            "    stays = FilterDB(emergency, 'SUBJECT_ID=' + str(sid))\n"
            "    for hadm in GetValue(stays, 'HADM_ID'):\n"
            "        orders = FilterDB(rx, 'HADM_ID=' + str(hadm))\n"
            "        for drug in GetValue(orders, 'DRUG'):\n"
            "            drugs.add(drug)\n"
            "print(len(drugs))",
            "Four tables are involved, so combine SQL-free tool calls in a loop.",
        ),
        "ANSWER: 2\nTERMINATE",
    ],
    "q19": [
        fenced(
            "females = FilterDB(LoadDB('patients'), 'GENDER=F')\n"
            "ids = set(GetValue(females, 'SUBJECT_ID'))\n"
            "emergency = FilterDB(LoadDB('admissions'), 'ADMISSION_TYPE=EMERGENCY')\n"
            "procedures = LoadDB('procedures_icd')\n"
            "titles_table = LoadDB('d_icd_procedures')\n"
            "titles = []\n"
            "for sid in sorted(ids):\n"
            "    stays = FilterDB(emergency, 'SUBJECT_ID=' + str(sid))\n"
            "    for hadm in GetValue(stays, 'HADM_ID'):\n"
            "        done = FilterDB(procedures, 'HADM_ID=' + str(hadm))\n"
            "        for code in GetValue(done, 'ICD9_CODE'):\n"
            "            entry = FilterDB(titles_table, 'ICD9_CODE=' + code)\n"
            "            titles.append(GetValue(entry, 'SHORT_TITLE')[0])\n"
            "print(titles)",
        ),
        "ANSWER: ['Venous cath NEC', 'Temporary tracheostomy']\nTERMINATE",
    ],
    "q20": [
        fenced(
            f"events = LoadDB('{table}')\nprint(GetValue(events, 'SUBJECT_ID, count'))",
            prose,
        )
        for table, prose in [
            ("inputevents", "Fluid intake should be in an input events table."),
            ("INPUTEVENTS", "Maybe the table name is uppercase."),
            ("inputevents_cv", "Trying the CareVue variant."),
            ("inputevents_mv", "Trying the MetaVision variant."),
            ("input_events", "Trying with an underscore."),
            ("chartevents", "Charted observations may include intake."),
            ("ioevents", "Trying an IO events table."),
            ("fluid_events", "Trying a fluid events table."),
            ("inputevents_raw", "Trying a raw table name."),
            ("io_records", "One more guess at the records table."),
        ]
    ],
}

KNOWLEDGE = {
    "q01": "Patient gender is the GENDER column of the patients table (values F and M); each row is one patient keyed by SUBJECT_ID.",
    "q02": "Hospital stays are rows of the admissions table, one per HADM_ID.",
    "q03": "Drug orders live in the prescriptions table; the DRUG column holds lowercase drug names and repeats across orders.",
    "q04": "The admissions table has an ADMISSION_TYPE column with values EMERGENCY, ELECTIVE and URGENT.",
    "q05": "Admission start times are ADMITTIME in the admissions table, filterable by SUBJECT_ID.",
    "q06": "Admission start times are ADMITTIME in the admissions table, filterable by SUBJECT_ID.",
    "q07": "Procedure names map to ICD-9 codes in d_icd_procedures (SHORT_TITLE, ICD9_CODE); performed procedures are rows of procedures_icd keyed by SUBJECT_ID and HADM_ID.",
    "q08": "Venous cath NEC is a SHORT_TITLE in d_icd_procedures; join its ICD9_CODE against procedures_icd to find the patients.",
    "q09": "Join admissions to patients on SUBJECT_ID; gender is patients.GENDER.",
    "q10": "Prescriptions hold the DRUG column and the SUBJECT_ID of the patient; gender comes from the patients table.",
    "q11": "Prescriptions carry DOSE_VAL_RX and HADM_ID; the paying INSURANCE is a column of admissions.",
    "q12": "Admissions and prescriptions both carry SUBJECT_ID, which identifies the patient.",
    "q13": "Map the procedure name through d_icd_procedures to procedures_icd, then join admissions on HADM_ID for the INSURANCE column.",
    "q14": "Map the procedure name through d_icd_procedures to procedures_icd for the SUBJECT_ID, then read that patient's rows in prescriptions.",
    "q15": "Temporary tracheostomy is ICD9_CODE 311 in d_icd_procedures; patients.GENDER uses uppercase F and M.",
    "q16": "The ventilation procedure is ICD9_CODE 9671; join procedures_icd to patients on SUBJECT_ID.",
    "q17": "Prescriptions have a ROUTE column with short codes such as PO, IV and SC; admissions carry ADMISSION_TYPE and patients carry GENDER.",
    "q18": "Venous catheterization is ICD9_CODE 3893. Combine procedures_icd, admissions (ADMISSION_TYPE) and prescriptions (DRUG, HADM_ID).",
    "q19": "Combine patients (GENDER), admissions (ADMISSION_TYPE, HADM_ID), procedures_icd (ICD9_CODE) and d_icd_procedures (SHORT_TITLE).",
    "q20": "This database has no table of fluid input events; it only stores patients, admissions, prescriptions and coded procedures.",
}

CAUSES = {
    "UnknownTable": (
        "The plan loads a table that does not exist in this database. Only "
        "patients, admissions, prescriptions, procedures_icd and "
        "d_icd_procedures are available; the question may not be answerable "
        "from them."
    ),
    "UnknownColumn": (
        "The plan references a column that is not in that table. Compare the "
        "name against the metadata; for example the admissions type column is "
        "ADMISSION_TYPE."
    ),
    "BadCondition": (
        "The filter condition does not parse. Conditions are 'COLUMN OP VALUE' "
        "with OP one of = != < <= > >=, or min(COLUMN)/max(COLUMN)."
    ),
    "EmptyResult": (
        "The query matched no rows. Comparisons are case-sensitive, so a "
        "lowercase literal like 'f' or 'oral' will not match 'F' or 'PO'; "
        "verify the exact stored value before filtering."
    ),
}


class ScriptedPlanner:
    """Deterministic stand-in for the live model, keyed purely on prompts."""

    def __init__(self, question_to_qid):
        self.question_to_qid = question_to_qid

    def complete(self, messages, temperature):
        system = messages[0].content
        if system == KNOWLEDGE_SYSTEM:
            return KNOWLEDGE[self._qid(messages[-1].content)]
        if system == DEBUG_SYSTEM:
            m = re.search(r"^Error type: (\w+)$", messages[-1].content, re.MULTILINE)
            error_type = m.group(1) if m else ""
            return CAUSES.get(
                error_type, "The execution failed; re-check the plan against the tool definitions."
            )
        qid = self._qid(messages[1].content)
        turn = (len(messages) - 2) // 2
        return SCENARIOS[qid][turn]

    def _qid(self, prompt: str) -> str:
        question = None
        for line in prompt.splitlines():
            if line.startswith("Question: "):
                question = line[len("Question: "):]
        return self.question_to_qid[question]


def agent_config() -> AgentConfig:
    initial = [
        Demonstration(r["question"], r["code"])
        for r in json.loads((FIXTURES / "initial_demos.json").read_text(encoding="utf-8"))
    ]
    knowledge_demos = [
        (r["question"], r["knowledge"])
        for r in json.loads((FIXTURES / "knowledge_demos.json").read_text(encoding="utf-8"))
    ]
    return AgentConfig(initial_demos=initial, knowledge_demos=knowledge_demos)


def main():
    db = load_database(FIXTURES / "demo_ehr" / "tables", FIXTURES / "demo_ehr" / "metadata.json")
    dataset = load_dataset(FIXTURES / "demo_questions.jsonl")
    planner = ScriptedPlanner({item.question: item.id for item in dataset})

    trace_path = FIXTURES / "replay_trace.jsonl"
    trace_path.write_text("", encoding="utf-8")
    recorder = RecordingBackend(planner, trace_path)
    recorded = evaluate(agent_config(), db, dataset, recorder, store=MemoryStore(None))
    print("recorded:", recorded.overall.sr(), recorded.overall.cr())

    replayed = evaluate(
        agent_config(),
        db,
        dataset,
        ReplayBackend.load(trace_path),
        store=MemoryStore(None),
        trace_id=trace_id_of(trace_path),
    )
    (FIXTURES / "expected_report.json").write_text(replayed.to_json(), encoding="utf-8")
    print("replayed:", replayed.overall.sr(), replayed.overall.cr())
    print("failures:", replayed.failures)
    for row in replayed.items:
        flag = "ok " if row["success"] else ("comp" if row["completion"] else "fail")
        print(f"  {row['id']} {flag} level={row['level']} steps={row['steps_used']} label={row['failure_label']}")


if __name__ == "__main__":
    main()
