use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use medcorr_core::corpus::{ClinicalNote, ErrorAnnotation};
use medcorr_core::eval::rouge1_f1;
use medcorr_core::prompt::{IclExample, TemplateName, TemplateSet, Verdict};
use medcorr_core::reason::majority_vote;
use medcorr_core::retrieval::{knn, Embedding, IndexEntry, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    Embedding::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_knn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("knn");
    for (n, dim) in [(1_000, 64), (2_000, 1536)] {
        let entries = (0..n)
            .map(|i| IndexEntry {
                note_id: format!("n{i:05}"),
                embedding: random_vector(&mut rng, dim),
                error_flag: i % 2 == 0,
            })
            .collect();
        let index = VectorIndex::build("bench", entries).unwrap();
        let query = random_vector(&mut rng, dim);
        group.bench_with_input(BenchmarkId::new("k4", format!("{n}x{dim}")), &query, |b, q| {
            b.iter(|| knn(&index, black_box(q), 4).unwrap())
        });
    }
    group.finish();
}

fn bench_rouge(c: &mut Criterion) {
    let a = "Intravenous ceftriaxone, vancomycin and dexamethasone are started for suspected meningitis.";
    let b = "Oral ibuprofen is given and the patient is sent home with advice to return if worse.";
    c.bench_function("rouge1_f1", |bench| {
        bench.iter(|| rouge1_f1(black_box(a), black_box(b)))
    });
}

fn bench_vote(c: &mut Criterion) {
    let votes = vec![
        Some(Verdict::error(3, Some("The diagnosis is acute gout.".into()), "s1")),
        Some(Verdict::error(3, Some("The diagnosis is gout.".into()), "s2")),
        Some(Verdict::no_error("s3")),
    ];
    c.bench_function("majority_vote", |b| {
        b.iter(|| majority_vote(black_box(&votes), 7).unwrap())
    });
}

fn bench_render(c: &mut Criterion) {
    let templates = TemplateSet::builtin();
    let body: String = (0..12)
        .map(|i| format!("{i} Sentence number {i} of the clinical note.\n"))
        .collect();
    let note = ClinicalNote::from_numbered("q", body.trim_end()).unwrap();
    let examples: Vec<IclExample> = (0..4)
        .map(|i| IclExample {
            note: ClinicalNote::from_numbered(format!("t{i}"), body.trim_end()).unwrap(),
            annotation: if i % 2 == 0 {
                ErrorAnnotation::no_error()
            } else {
                ErrorAnnotation::error(3, "Sentence number 3, corrected.")
            },
            reason: Some("The findings support the stated conclusion.".into()),
        })
        .collect();
    let extra = BTreeMap::new();
    c.bench_function("render_reason_icl", |b| {
        b.iter(|| {
            templates
                .render(TemplateName::ReasonIcl, black_box(&note), &examples, &extra)
                .unwrap()
        })
    });
}

criterion_group!(benches, bench_knn, bench_rouge, bench_vote, bench_render);
criterion_main!(benches);
