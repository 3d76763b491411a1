#!/usr/bin/env python3
"""Regenerates the static fixtures under data/.

Clause texts are synthetic. Option sets are reconstructions; the published
option lists exist only as figures. Cassettes are produced afterwards by
record.sh, which drives the caf binary against the mock scripts written here.
"""

import json
import random
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[2]
DATA = ROOT / "data"

SILENT = "The clause is silent"
UNABLE = "Unable to determine"

P1 = (
    "Referring only to the information contained in the clause below, only select which one "
    "of the below numbered options is implied by the clause, without providing any other "
    "information or justification.  If you cannot determine which of the conditions are "
    "implied, respond with the exact text: “The clause is silent”.\n"
    "{{Options}}\n"
    "{{Clause}}"
)

P2 = (
    "Referring only to the information contained in the clause below, only select the numbered "
    "option that is implied by the clause, without providing any other information or "
    "justification. If you cannot determine which of the conditions are implied, respond with "
    "the exact text: “The clause is silent”.\n"
    "{{Options}}\n"
    "{{Clause}}"
)

P3 = (
    "Using the text provided, follow the subsequent instructions:\n"
    "{{Clause}}\n"
    "Respond with all options which are implied by the provided text, without providing any "
    "other information or justification and by following the rules.\n"
    "Rules:\n"
    "    - If it cannot be determined which of the conditions are implied or if it is required "
    "to make assumptions, respond with the exact text: \"Unable to determine.\"\n"
    "    - If the terms in the options are not used in the text, respond with the exact text: "
    "\"Unable to determine.\"\n"
    "Options:\n"
    "{{Options}}"
)

P4 = (
    "Read the following permitted use of confidential information legal clause:\n"
    "{{Clause}}\n"
    "Pretend you are a party to the agreement in which the permitted use of confidential "
    "information legal clause you have read exists in. You only know what you have read in "
    "this prompt. For what purposes are you allowed to use the confidential information? If "
    "the clause does not specify the purpose for which you may use the confidential "
    "information, respond with: \"Unable to determine\". In your response, only include the "
    "following most correct groups:\n"
    "{{Options}}\n"
    "In your response, only include the bucket names above. Do not provide an explanation "
    "or additional information."
)

TEMPLATES = [
    ("P1", "single", P1, [SILENT, UNABLE]),
    ("P2", "single", P2, [SILENT, UNABLE]),
    ("P3", "multi", P3, [UNABLE, SILENT]),
    ("P4", "multi", P4, [UNABLE, SILENT]),
]

# canonical ids shared by every indemnity option set, in ordinal order
IND = ["landlord_indemnifies_tenant", "tenant_indemnifies_landlord", "mutual", "none"]
INFO = ["compliance", "evaluation", "performance", "development", "rights"]

OPTION_SETS = {
    "S1": ("indemnity", "parties", [
        ("Landlord indemnifies Tenant.", []),
        ("Tenant indemnifies Landlord.", []),
        ("There is mutual indemnification.", ["Mutual indemnification"]),
        ("No indemnification.", ["There is no indemnification"]),
    ]),
    "S2": ("indemnity", "parties", [
        ("Landlord indemnifies Tenant", []),
        ("Tenant indemnifies Landlord", []),
        ("Landlord and Tenant indemnify each other", ["Both parties indemnify each other"]),
        ("Neither party indemnifies the other", []),
    ]),
    "S3": ("indemnity", "parties", [
        ("The landlord indemnifies the tenant.", []),
        ("The tenant indemnifies the landlord.", []),
        ("There is mutual indemnification.", []),
        ("The clause does not contain an indemnification.", []),
    ]),
    "S4": ("indemnity", "parties", [
        ("Landlord (also Lessor or Buyer) indemnifies Tenant (also Lessee or Seller).", []),
        ("Tenant (also Lessee or Seller) indemnifies Landlord (also Lessor or Buyer).", []),
        ("Landlord (also Lessor or Buyer) and Tenant (also Lessee or Seller) indemnify each other.", []),
        ("No indemnification.", []),
    ]),
    "T1": ("info_sharing", None, [
        ("Legal compliance", []),
        ("Evaluating a transaction", []),
        ("Performing the agreement", []),
        ("Product development", []),
        ("Exercising rights", []),
    ]),
    "T2": ("info_sharing", None, [
        ("The information may be used to comply with legal requirements.", []),
        ("The information may be used to evaluate a potential transaction between the parties.", []),
        ("The information may be used to perform obligations under the agreement.", []),
        ("The information may be used to develop new products.", []),
        ("The information may be used to exercise rights under the agreement.", []),
    ]),
}

QUESTIONS = [
    {"id": "indemnity", "text": "In the clause below, who indemnifies whom?",
     "mode": "single_select", "option_set_id": "S1"},
    {"id": "info_sharing",
     "text": "For what purpose are the parties sharing information according to the clause below?",
     "mode": "multi_select", "option_set_id": "T2"},
]

# --- synthetic clause text -------------------------------------------------

PARTIES = [("Tenant", "Landlord"), ("Lessee", "Lessor")]
HARM = ["indemnify, defend and hold harmless", "indemnify and hold harmless", "defend, indemnify and save harmless"]
LOSSES = [
    "claims, losses, damages, liabilities, costs and expenses",
    "Environmental Costs",
    "claims, fines, penalties and remediation costs",
    "losses and reasonable attorneys' fees",
]
TENANT_CAUSE = [
    "the introduction of Hazardous Materials onto the Premises by {t} or its agents after the Commencement Date",
    "any breach by {t} of its obligations under Environmental Laws",
    "the use, storage or disposal of Hazardous Substances at the Premises during the Term",
    "any release of Hazardous Materials caused by {t}, its employees, contractors or invitees",
]
LANDLORD_CAUSE = [
    "Hazardous Materials present on the Premises prior to the Commencement Date",
    "any violation of Environmental Requirements existing before the Effective Date",
    "contamination migrating onto the Premises from adjacent property owned by {l}",
]
NONE_TEXT = [
    "{t} shall comply with all Environmental Laws applicable to its use of the Premises and shall not store Hazardous Materials on the Premises except in customary quantities.",
    "{l} makes no representation regarding the environmental condition of the Premises, which {t} accepts in its present condition.",
    "{t} shall promptly deliver to {l} copies of any notice received from a governmental authority concerning Hazardous Materials at the Premises.",
    "Neither party shall store, use or dispose of any Hazardous Materials at the Property in violation of applicable Environmental Laws.",
]
AFFILIATES = ["its officers, directors and employees", "its Affiliates", "the {l} Indemnified Parties", "its lenders and agents"]


def tenant_sentence(rng, t, l):
    aff = rng.choice(AFFILIATES).format(l=l)
    return (f"{t} shall {rng.choice(HARM)} {l} and {aff} from and against any and all "
            f"{rng.choice(LOSSES)} arising out of {rng.choice(TENANT_CAUSE).format(t=t, l=l)}.")


def landlord_sentence(rng, t, l):
    return (f"{l} shall {rng.choice(HARM)} {t} from and against any and all {rng.choice(LOSSES)} "
            f"arising from {rng.choice(LANDLORD_CAUSE).format(t=t, l=l)}.")


def indemnity_text(rng, label, n):
    t, l = PARTIES[n % 2]
    preamble = f"Section {10 + n % 17}.{1 + n % 5} Environmental Matters. "
    if label == "tenant_indemnifies_landlord":
        body = tenant_sentence(rng, t, l)
    elif label == "landlord_indemnifies_tenant":
        body = landlord_sentence(rng, t, l)
    elif label == "mutual":
        parts = [tenant_sentence(rng, t, l), landlord_sentence(rng, t, l)]
        rng.shuffle(parts)
        body = " ".join(parts)
    else:
        body = rng.choice(NONE_TEXT).format(t=t, l=l)
    survival = " The obligations in this Section shall survive the expiration or termination of this Lease."
    return preamble + body + (survival if n % 3 == 0 else "") + f" (Ref. {n:03d})"


PURPOSE = {
    "compliance": "complying with applicable law or an order of a court of competent jurisdiction",
    "evaluation": "evaluating a possible business transaction between the parties",
    "performance": "performing its obligations under this Agreement",
    "development": "jointly developing new products with the Disclosing Party",
    "rights": "exercising its rights under this Agreement",
}
INSUFFICIENT_TEXT = [
    "The Receiving Party shall hold the Confidential Information in strict confidence and shall not disclose it to any third party without prior written consent.",
    "Confidential Information shall remain the property of the Disclosing Party and shall be returned upon request.",
    "The Receiving Party shall protect the Confidential Information using at least the degree of care it uses for its own information of a similar nature.",
]


def info_text(rng, options, n):
    if not options:
        return rng.choice(INSUFFICIENT_TEXT) + f" (Ref. {n:03d})"
    purposes = " and ".join(PURPOSE[o] for o in options)
    lead = rng.choice(["The Receiving Party may use the Confidential Information solely for the purpose of",
                       "Confidential Information shall be used only for",
                       "Each party may use the other party's Confidential Information exclusively for"])
    return f"{lead} {purposes}. (Ref. {n:03d})"


# --- writers ----------------------------------------------------------------

def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def dump_json(obj):
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def dump_jsonl(records):
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def write_templates():
    for tid, mode, body, escapes in TEMPLATES:
        head = (f"---\nid: {tid}\nselection_mode: {mode}\nnumbering_style: dot\n"
                f"escape_phrases: {json.dumps(escapes, ensure_ascii=False)}\n---\n")
        write(DATA / "templates" / f"{tid}.tmpl", head + body + "\n")


def write_option_sets():
    for sid, (question, synonyms, opts) in OPTION_SETS.items():
        ids = IND if question == "indemnity" else INFO
        obj = {
            "id": sid,
            "question_id": question,
            "synonym_table_id": synonyms,
            "note": "reconstruction; the published option lists are figures only",
            "options": [{"canonical_id": ids[i], "text": text, "aliases": aliases}
                        for i, (text, aliases) in enumerate(opts)],
        }
        write(DATA / "option_sets" / f"{sid}.json", dump_json(obj))
    write(DATA / "synonyms" / "parties.json", dump_json({
        "id": "parties",
        "groups": [["Tenant", "Lessee", "Seller"], ["Landlord", "Lessor", "Buyer"]],
    }))
    write(DATA / "questions.json", dump_json({"questions": QUESTIONS}))


def indemnity_dataset():
    rng = random.Random(20231)
    labels = [IND[0]] * 6 + [IND[1]] * 71 + [IND[2]] * 39 + [IND[3]] * 5
    rng.shuffle(labels)
    clauses, gold = [], []
    for n, label in enumerate(labels, start=1):
        cid = f"ind-{n:03d}"
        clauses.append({"kind": "clause", "id": cid, "clause_type": "environmental_indemnity",
                        "text": indemnity_text(rng, label, n), "source": "synthetic"})
        gold.append({"kind": "label", "clause_id": cid, "question_id": "indemnity",
                     "option_ids": [label], "insufficient": False})
    manifest = {"kind": "manifest", "question_id": "indemnity", "max_chars": 20000,
                "distribution": {IND[0]: 6, IND[1]: 71, IND[2]: 39, IND[3]: 5}}
    write(DATA / "datasets" / "indemnity.jsonl", dump_jsonl([manifest] + clauses + gold))
    return clauses, gold


def info_dataset():
    rng = random.Random(20232)
    combos = ([("evaluation", "rights")] * 30 + [("evaluation", "performance")] * 14 +
              [("performance", "rights")] * 8 + [("compliance", "evaluation")] * 2 +
              [("compliance",)] * 2 + [("evaluation",)] * 35 + [("performance",)] * 18 +
              [("development",)] * 2 + [("rights",)] * 19 + [()] * 13)
    rng.shuffle(combos)
    clauses, gold = [], []
    for n, combo in enumerate(combos, start=1):
        cid = f"info-{n:03d}"
        clauses.append({"kind": "clause", "id": cid, "clause_type": "permitted_use",
                        "text": info_text(rng, list(combo), n), "source": "synthetic"})
        gold.append({"kind": "label", "clause_id": cid, "question_id": "info_sharing",
                     "option_ids": sorted(combo), "insufficient": not combo})
    manifest = {"kind": "manifest", "question_id": "info_sharing", "max_chars": 20000,
                "distribution": {"compliance": 4, "evaluation": 81, "performance": 40,
                                 "development": 2, "rights": 57}}
    write(DATA / "datasets" / "info_sharing.jsonl", dump_jsonl([manifest] + clauses + gold))
    return clauses, gold


# The 10-clause fixture: gold label and the scripted model answer, which is
# repeated identically for every rerun.
MINI = [
    ("tenant_indemnifies_landlord",
     "Tenant shall indemnify, defend and hold harmless Landlord from and against any and all claims arising out of Tenant's use of Hazardous Materials on the Premises.",
     "Tenant indemnifies Landlord."),
    ("tenant_indemnifies_landlord",
     "Tenant agrees to indemnify Landlord and its Affiliates against all Environmental Costs caused by Tenant or its contractors during the Term.",
     "The clause implies that Tenant indemnifies Landlord."),
    ("tenant_indemnifies_landlord",
     "Lessee shall defend, indemnify and save harmless Lessor from any fines or penalties resulting from Lessee's breach of Environmental Laws.",
     "2"),
    ("tenant_indemnifies_landlord",
     "Lessee shall indemnify Lessor and its Affiliates for any and all Environmental Costs incurred in connection with Hazardous Substances introduced by Lessee.",
     "Lessee indemnifies Lessor"),
    ("mutual",
     "Each of Landlord and Tenant shall indemnify the other from claims arising from Hazardous Materials introduced by the indemnifying party.",
     "There is mutual indemnification."),
    ("mutual",
     "Lessor shall indemnify the Lessee Indemnified Parties for Environmental Liabilities existing before the Effective Date, and Lessee shall indemnify the Lessor Indemnified Parties for Environmental Liabilities caused by Lessee thereafter.",
     "Lessor indemnifies Lessee Indemnified Parties. Lessee indemnifies Lessor Indemnified Parties."),
    ("mutual",
     "Tenant shall indemnify Landlord for contamination caused by Tenant. Landlord shall indemnify Tenant for contamination existing on the Commencement Date.",
     "Option 3"),
    ("landlord_indemnifies_tenant",
     "Landlord shall indemnify and hold Tenant harmless from all remediation costs relating to Hazardous Materials present on the Property prior to the date of this Lease.",
     "Landlord indemnifies Tenant."),
    ("none",
     "Tenant shall comply with all Environmental Laws and shall not permit Hazardous Materials to be stored on the Premises.",
     "No indemnification."),
    ("tenant_indemnifies_landlord",
     "Tenant shall indemnify Landlord against all losses resulting from any release of Hazardous Materials by Tenant, its employees or invitees.",
     "Landlord indemnifies Tenant."),
]


def mini_dataset():
    manifest = {"kind": "manifest", "question_id": "indemnity", "max_chars": 20000}
    clauses, gold, rules = [], [], []
    for n, (label, text, answer) in enumerate(MINI, start=1):
        cid = f"mini-{n:02d}"
        clauses.append({"kind": "clause", "id": cid, "clause_type": "environmental_indemnity",
                        "text": text, "source": "synthetic"})
        gold.append({"kind": "label", "clause_id": cid, "question_id": "indemnity",
                     "option_ids": [label], "insufficient": False})
        rules.append({"contains": text, "responses": [answer]})
    write(DATA / "datasets" / "indemnity_mini.jsonl", dump_jsonl([manifest] + clauses + gold))
    # the default keeps ad hoc clauses answerable when the service runs on this script
    write(DATA / "mock" / "mini_p1_s1.json", dump_json({"rules": rules, "default": "The clause is silent."}))


SURFACE = {
    IND[0]: ["Landlord indemnifies Tenant.", "1", "Option 1", "The clause implies that Landlord indemnifies Tenant.",
             "Lessor indemnifies Lessee."],
    IND[1]: ["Tenant indemnifies Landlord.", "2", "(2)", "The clause implies that Tenant indemnifies Landlord.",
             "Lessee indemnifies Lessor.", "2. Tenant indemnifies Landlord."],
    IND[2]: ["There is mutual indemnification.", "3", "Option 3",
             "Tenant indemnifies Landlord. Landlord indemnifies Tenant.", "Mutual indemnification."],
    IND[3]: ["No indemnification.", "4", "The clause is silent."],
}


def indemnity_mock(clauses, gold, rng, p_correct, p_clean, name):
    rules = []
    for c, g in zip(clauses, gold):
        label = g["option_ids"][0]
        if rng.random() < p_correct:
            forms = SURFACE[label]
            answer = forms[0] if rng.random() < p_clean else rng.choice(forms[1:])
        else:
            answer = rng.choice(SURFACE[rng.choice([x for x in IND if x != label])][:2])
        rules.append({"contains": c["text"], "responses": [answer]})
    write(DATA / "mock" / name, dump_json({"rules": rules}))


def info_mock(clauses, gold, rng):
    texts = {cid: text for cid, (text, _) in zip(INFO, OPTION_SETS["T2"][2])}
    rules = []
    for c, g in zip(clauses, gold):
        if g["insufficient"]:
            answer = "Unable to determine." if rng.random() < 0.8 else texts["performance"]
        elif rng.random() < 0.7:
            answer = "\n".join(texts[o] for o in g["option_ids"])
        else:
            answer = texts[rng.choice([o for o in INFO if o not in g["option_ids"]])]
        rules.append({"contains": c["text"], "responses": [answer]})
    write(DATA / "mock" / "info_p4_t2.json", dump_json({"rules": rules}))


def example_sets(clauses, gold):
    rng = random.Random(20233)
    by_label = {k: [c["id"] for c, g in zip(clauses, gold) if g["option_ids"] == [k]] for k in IND}
    picks = {k: rng.sample(v, 2) for k, v in by_label.items()}
    for i, name in enumerate(["E1", "E2"]):
        write(DATA / "example_sets" / f"{name}.json", dump_json({
            "id": name,
            "examples": [{"clause_id": picks[k][i], "answer_option_ids": [k]} for k in IND],
        }))


def main():
    write_templates()
    write_option_sets()
    ind_clauses, ind_gold = indemnity_dataset()
    info_clauses, info_gold = info_dataset()
    mini_dataset()
    example_sets(ind_clauses, ind_gold)
    rng = random.Random(20234)
    indemnity_mock(ind_clauses, ind_gold, rng, 0.78, 0.45, "indemnity_p1_s1.json")
    indemnity_mock(ind_clauses, ind_gold, rng, 0.82, 0.85, "indemnity_p1_s1_e1e2.json")
    info_mock(info_clauses, info_gold, rng)
    return 0


if __name__ == "__main__":
    sys.exit(main())
