"""Generates the bundled synthetic corpus and the mock script that drives it.

Outputs (next to this file):
  train.csv        24 annotated training notes, half with one error
  eval.csv         20 annotated evaluation notes, half with one error
  mock_script.json scripted model answers keyed on the target note and prompt stage

The notes are invented. The script covers every cascade stage, misses and
false alarms, unanimous and split reason votes, and each ensemble rule.

Run: python3 generate.py
"""

import csv
import json
from pathlib import Path

HERE = Path(__file__).resolve().parent

# (presentation, finding, test, diagnosis, wrong diagnosis, treatment, wrong treatment, follow-up)
SCENARIOS = [
    (
        "presents with crushing chest pain radiating to the left arm for one hour.",
        "The patient is diaphoretic and hypotensive on arrival.",
        "ECG shows ST elevation in leads II, III and aVF.",
        "The diagnosis is acute inferior myocardial infarction.",
        "The diagnosis is acute pericarditis.",
        "Aspirin is given and the patient is taken for emergent coronary angiography.",
        "Antacids are given and the patient is discharged home.",
        "Cardiology will follow up after the procedure.",
    ),
    (
        "reports three days of fever and cough productive of rusty sputum.",
        "Crackles are heard over the right lower lung field.",
        "Chest radiograph shows right lower lobe consolidation.",
        "The diagnosis is community-acquired pneumonia.",
        "The diagnosis is acute pulmonary embolism.",
        "Ceftriaxone and azithromycin are started.",
        "Oseltamivir is started as the only therapy.",
        "A repeat radiograph is planned in six weeks.",
    ),
    (
        "presents with polyuria, polydipsia and vomiting for two days.",
        "Breathing is deep and rapid with a fruity odour.",
        "Glucose is 450 mg/dL with serum ketones and an anion gap of 24.",
        "The diagnosis is diabetic ketoacidosis.",
        "The diagnosis is acute viral gastroenteritis.",
        "Intravenous fluids and an insulin infusion are started.",
        "Oral metformin is started and fluids are withheld.",
        "Potassium is checked every two hours.",
    ),
    (
        "developed sudden right-sided weakness and slurred speech forty minutes ago.",
        "There is a right facial droop and right arm drift.",
        "Non-contrast head CT shows no haemorrhage.",
        "The diagnosis is acute ischaemic stroke.",
        "The diagnosis is complicated migraine.",
        "Intravenous alteplase is given within the treatment window.",
        "A warfarin loading dose is given immediately.",
        "Neurology admits the patient to the stroke unit.",
    ),
    (
        "reports periumbilical pain that migrated to the right lower quadrant.",
        "There is rebound tenderness at McBurney's point.",
        "White cell count is 15,000 and CT shows a dilated appendix.",
        "The diagnosis is acute appendicitis.",
        "The diagnosis is acute cholecystitis.",
        "The patient is taken for laparoscopic appendectomy.",
        "The patient is scheduled for outpatient colonoscopy.",
        "Antibiotics are continued for twenty-four hours after surgery.",
    ),
    (
        "has a history of asthma and presents with wheeze after a viral illness.",
        "Peak flow is fifty percent of predicted.",
        "Oxygen saturation is 93 percent on room air.",
        "The diagnosis is an acute asthma exacerbation.",
        "The diagnosis is congestive heart failure.",
        "Nebulised albuterol and oral prednisone are given.",
        "Oral propranolol is started to control the heart rate.",
        "An asthma action plan is reviewed before discharge.",
    ),
    (
        "reports dysuria and urinary frequency for two days without fever.",
        "There is mild suprapubic tenderness and no flank pain.",
        "Urinalysis is positive for nitrites and leukocyte esterase.",
        "The diagnosis is uncomplicated cystitis.",
        "The diagnosis is acute pyelonephritis.",
        "Nitrofurantoin is prescribed for five days.",
        "Intravenous vancomycin is prescribed for fourteen days.",
        "The patient is advised to return if fever or flank pain develops.",
    ),
    (
        "reports fatigue and exertional dyspnoea over three months.",
        "Conjunctival pallor is noted.",
        "Haemoglobin is 8.9 g/dL with low MCV and ferritin of 6 ng/mL.",
        "The diagnosis is iron deficiency anaemia.",
        "The diagnosis is vitamin B12 deficiency anaemia.",
        "Oral ferrous sulfate is started and a colonoscopy is arranged.",
        "Monthly cyanocobalamin injections are started.",
        "Haemoglobin will be rechecked in four weeks.",
    ),
    (
        "reports heat intolerance, palpitations and weight loss.",
        "A diffuse goitre and lid lag are present.",
        "TSH is suppressed and free T4 is elevated.",
        "The diagnosis is Graves disease.",
        "The diagnosis is primary hypothyroidism.",
        "Methimazole and propranolol are started.",
        "Levothyroxine is started at full replacement dose.",
        "Thyroid function will be repeated in six weeks.",
    ),
    (
        "woke with a hot, swollen and exquisitely painful first toe joint.",
        "The first metatarsophalangeal joint is erythematous.",
        "Joint aspirate shows negatively birefringent needle-shaped crystals.",
        "The diagnosis is acute gout.",
        "The diagnosis is septic arthritis.",
        "Colchicine is started for the acute flare.",
        "The joint is immobilised and no medication is given.",
        "Urate-lowering therapy will be discussed after the flare.",
    ),
    (
        "presents with pleuritic chest pain and dyspnoea five days after hip surgery.",
        "Heart rate is 118 and the left calf is swollen.",
        "CT pulmonary angiography shows a filling defect in the right pulmonary artery.",
        "The diagnosis is acute pulmonary embolism.",
        "The diagnosis is spontaneous pneumothorax.",
        "Therapeutic anticoagulation with heparin is started.",
        "A chest tube is inserted.",
        "Anticoagulation will continue for at least three months.",
    ),
    (
        "presents with fever, severe headache and neck stiffness.",
        "Kernig sign is positive.",
        "Cerebrospinal fluid shows neutrophils, low glucose and high protein.",
        "The diagnosis is bacterial meningitis.",
        "The diagnosis is tension-type headache.",
        "Intravenous ceftriaxone, vancomycin and dexamethasone are started.",
        "Oral ibuprofen is given and the patient is sent home.",
        "Close contacts are offered prophylaxis.",
    ),
]

PATIENTS = [
    "A 58-year-old man", "A 34-year-old woman", "A 71-year-old woman", "A 45-year-old man",
    "A 22-year-old woman", "A 63-year-old man", "A 29-year-old man", "A 52-year-old woman",
    "A 40-year-old woman", "A 67-year-old man", "A 48-year-old woman", "A 19-year-old man",
]

DIAGNOSIS, TREATMENT = 3, 4


def sentences(s, patient, wrong=None):
    pres, finding, test, dx, wrong_dx, tx, wrong_tx, follow = s
    out = [f"{patient} {pres}", finding, test, dx, tx, follow]
    if wrong == DIAGNOSIS:
        out[DIAGNOSIS] = wrong_dx
    elif wrong == TREATMENT:
        out[TREATMENT] = wrong_tx
    return out


def numbered(lines):
    return "\n".join(f"{i} {t}" for i, t in enumerate(lines))


def note(note_id, s, patient, wrong=None):
    lines = sentences(s, patient, wrong)
    if wrong is None:
        return {"note_id": note_id, "lines": lines, "flag": 0, "sid": -1, "corrected": "NA"}
    fixed = sentences(s, patient)[wrong]
    return {"note_id": note_id, "lines": lines, "flag": 1, "sid": wrong, "corrected": fixed}


def write_csv(path, notes):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["note_id", "text", "error_flag", "error_sentence_id", "corrected_sentence"])
        for n in notes:
            w.writerow([n["note_id"], numbered(n["lines"]), n["flag"], n["sid"], n["corrected"]])


def build():
    train = []
    for i, s in enumerate(SCENARIOS):
        p1, p2 = PATIENTS[i], PATIENTS[(i + 5) % len(PATIENTS)]
        train.append(note(f"train-{2 * i:02d}", s, p1))
        train.append(note(f"train-{2 * i + 1:02d}", s, p2, DIAGNOSIS if i % 2 == 0 else TREATMENT))

    evals = []
    for i, s in enumerate(SCENARIOS[:10]):
        p1, p2 = PATIENTS[(i + 3) % len(PATIENTS)], PATIENTS[(i + 8) % len(PATIENTS)]
        evals.append(note(f"eval-{2 * i:02d}", s, p1))
        evals.append(note(f"eval-{2 * i + 1:02d}", s, p2, TREATMENT if i % 2 == 0 else DIAGNOSIS))
    return train, evals


def yes(sid, corrected=None):
    text = f"ERROR: yes\nSENTENCE_ID: {sid}"
    return text + (f"\nCORRECTED: {corrected}" if corrected else "")


def script(evals):
    rules = []

    def rule(target, tag, respond):
        rules.append({"target": target, "tag": tag, "respond": respond})

    error_notes = [n for n in evals if n["flag"]]
    # Detection: which cascade stage first reports the error (None = missed),
    # and whether it points at the right sentence.
    stages = ["STANDARD_DETECT", "COT_INTERVENTION", "COT_DIAGNOSIS", "COT_MANAGEMENT", None]
    for k, n in enumerate(error_notes):
        wrong_line = n["lines"][n["sid"]]
        stage = stages[k % len(stages)]
        sid = n["sid"] if k != 6 else n["sid"] - 1
        if stage:
            rule(wrong_line, f"/{stage}", yes(sid))
        rule(wrong_line, "/CORRECTION", f"CORRECTED: {n['corrected']}")
        rule(wrong_line, "/ENSEMBLE_CORRECTION", f"CORRECTED: {n['corrected']}")

        # Reason samples: vary agreement patterns across notes.
        fix, alt = n["corrected"], n["corrected"].rstrip(".") + " as indicated."
        pattern = k % 5
        votes = {
            0: [yes(n["sid"], fix), yes(n["sid"], fix), yes(n["sid"], fix)],
            1: [yes(n["sid"], fix), yes(n["sid"], alt), "ERROR: no"],
            2: [yes(n["sid"], fix), "ERROR: no", "ERROR: no"],
            3: [yes(1, "Different sentence fixed."), yes(1, "Different sentence fixed."), yes(n["sid"], fix)],
            4: [yes(n["sid"], fix), "I am not sure.", yes(n["sid"], fix)],
        }[pattern]
        for i, v in enumerate(votes, start=1):
            rule(wrong_line, f"/sample_{i}", v)

    # One false alarm on an error-free note, caught by the diagnosis stage.
    clean = next(n for n in evals if not n["flag"])
    rule(clean["lines"][0], "/COT_DIAGNOSIS", yes(3))
    rule(clean["lines"][0], "/sample_1", yes(3, "A fabricated correction."))

    rules += [
        {"tag": "/REASON_GEN", "all": ["Corrected sentence:"],
         "respond": "The original sentence contradicts the findings reported earlier in the note; the corrected sentence matches them."},
        {"tag": "/REASON_GEN",
         "respond": "The examination and test results support the stated diagnosis and the management follows standard practice."},
        {"tag": "/CORRECTION", "respond": "CORRECTED: The sentence is correct as written."},
        {"tag": "/ENSEMBLE_CORRECTION", "respond": "CORRECTED: The sentence is correct as written."},
    ]
    return {"default": "ERROR: no", "target_marker": "Clinical note to ", "rules": rules}


def main():
    train, evals = build()
    write_csv(HERE / "train.csv", train)
    write_csv(HERE / "eval.csv", evals)
    with open(HERE / "mock_script.json", "w") as f:
        json.dump(script(evals), f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
