//! Writes the synthetic demo files under `demo/`.
//!
//! `cargo run --release --example make_demo_data`

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use sor::design::ratio_from_counts;
use sor::simlab::runner::stream_rng;

const SEED: u64 = 7;

struct Child {
    visits: usize,
    age: f64,
    female: bool,
    race: usize,
    y: Vec<u64>,
    z: bool,
}

/// Symptom counts for a community of children; referral Z follows a latent
/// severity shared with the counts.
fn adhd(dir: &Path) -> std::io::Result<()> {
    let mut rng = stream_rng(SEED, 0, "adhd");
    let severity = Normal::new(0.0, 0.6).unwrap();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut kids: Vec<Child> = (0..30_000)
        .map(|_| {
            let female = rng.random_bool(0.5);
            let race = match rng.random::<f64>() {
                u if u < 0.7 => 0,
                u if u < 0.9 => 1,
                _ => 2,
            };
            let age = rng.random_range(3..=7) as f64;
            let b = severity.sample(&mut rng);
            let visits = rng.random_range(5..=8);
            let fem = f64::from(u8::from(female));
            let y = (0..visits)
                .map(|t| {
                    let t = t as f64;
                    let tk2 = (t - 2.0).max(0.0);
                    let eta = 0.6 + 0.06 * t - 0.12 * tk2 - 0.12 * (age - 5.0) - 0.45 * fem
                        + 0.4 * f64::from(u8::from(race == 1))
                        - 0.1 * f64::from(u8::from(race == 2))
                        + 0.05 * fem * t
                        - 0.1 * fem * tk2
                        + b;
                    Poisson::new(eta.exp()).unwrap().sample(&mut rng) as u64
                })
                .collect();
            Child { visits, age, female, race, y, z: b + noise.sample(&mut rng) > 0.0 }
        })
        .collect();
    // Referral prevalence 5% among girls and 15% among boys.
    for female in [true, false] {
        let prevalence = if female { 0.05 } else { 0.15 };
        let mut scores: Vec<(f64, usize)> = kids
            .iter()
            .enumerate()
            .filter(|(_, k)| k.female == female)
            .map(|(i, k)| (k.y.iter().sum::<u64>() as f64 / k.visits as f64 + noise.sample(&mut rng), i))
            .collect();
        scores.sort_by(|a, b| b.0.total_cmp(&a.0));
        let n_ref = (prevalence * scores.len() as f64).round() as usize;
        for (rank, (_, i)) in scores.into_iter().enumerate() {
            kids[i].z = rank < n_ref;
        }
    }
    // Sample composition: 25 of 46 girls and 113 of 209 boys referred.
    let mut chosen = Vec::new();
    for (female, z, n) in [(true, true, 25), (true, false, 21), (false, true, 113), (false, false, 96)] {
        let mut pool: Vec<usize> = (0..kids.len()).filter(|&i| kids[i].female == female && kids[i].z == z).collect();
        pool.shuffle(&mut rng);
        chosen.extend(pool.into_iter().take(n));
    }
    chosen.sort_unstable();

    let mut csv = String::from("id,wave,symptoms,referred,t,tk2,age,female,aa,other,female_t,female_tk2\n");
    for (k, &i) in chosen.iter().enumerate() {
        let c = &kids[i];
        let fem = u8::from(c.female);
        for (t, y) in c.y.iter().enumerate() {
            let tk2 = t.saturating_sub(2);
            writeln!(
                csv,
                "c{:03},{t},{y},{},{t},{tk2},{},{fem},{},{},{},{}",
                k + 1,
                u8::from(c.z),
                c.age - 5.0,
                u8::from(c.race == 1),
                u8::from(c.race == 2),
                usize::from(fem) * t,
                usize::from(fem) * tk2
            )
            .unwrap();
        }
    }
    std::fs::write(dir.join("adhd_analog.csv"), csv)?;

    let girls = ratio_from_counts(25, 21, 0.05).unwrap();
    let boys = ratio_from_counts(113, 96, 0.15).unwrap();
    let config = serde_json::json!({
        "family": "poisson",
        "response": "symptoms",
        "id": "id",
        "time": "wave",
        "aux": "referred",
        "mean": ["1", "t", "tk2", "age", "female", "aa", "other", "female_t", "female_tk2"],
        "w1": ["1", "t", "tk2", "age", "female", "aa", "other"],
        "w2": ["1", "t", "tk2", "age", "female", "aa", "other"],
        "h": "identity",
        "design": {
            "level": "subject",
            "strata": ["female"],
            "ratio": { "1": (girls * 1000.0).round() / 1000.0, "0": (boys * 1000.0).round() / 1000.0 }
        },
        "working": "exchangeable",
        "no_interference": true,
        "estimator": "sor"
    });
    std::fs::write(dir.join("adhd_analog.json"), serde_json::to_string_pretty(&config).unwrap() + "\n")
}

/// Daily log hormone values over two 28-day cycles; the three highest days of
/// each cycle are flagged (Z = 1) and sampled with probability 1/3, other
/// days with 3/25.
fn hormone(dir: &Path) -> std::io::Result<()> {
    let mut rng = stream_rng(SEED, 0, "hormone");
    let subject = Normal::new(0.0, 0.3).unwrap();
    let day_sd = Normal::new(0.0, 0.6).unwrap();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let (p1, p0) = (1.0 / 3.0, 3.0 / 25.0);
    let mut csv = String::from("id,day,log_lh,peak,fiber5,calories,bmi5,age10,aa,other,cycle2\n");
    for w in 0..250 {
        let bmi5 = 0.8 * std_normal.sample(&mut rng);
        let age10 = 0.5 * std_normal.sample(&mut rng);
        let race = match rng.random::<f64>() {
            u if u < 0.6 => 0,
            u if u < 0.8 => 1,
            _ => 2,
        };
        let (aa, other) = (u8::from(race == 1), u8::from(race == 2));
        let b = subject.sample(&mut rng);
        for cycle in 0..2 {
            let surge = rng.random_range(11..16);
            let days: Vec<(f64, f64, f64)> = (0..28)
                .map(|d| {
                    let fiber5 = 0.8 * std_normal.sample(&mut rng);
                    let calories = std_normal.sample(&mut rng);
                    let bump = if (surge..surge + 3).contains(&d) { 1.2 } else { 0.0 };
                    let eta = 1.35 - 0.03 * fiber5 - 0.03 * calories - 0.07 * bmi5 - 0.08 * age10
                        - 0.18 * f64::from(aa)
                        - 0.11 * f64::from(other)
                        + 0.05 * cycle as f64;
                    (eta + b + bump + day_sd.sample(&mut rng), fiber5, calories)
                })
                .collect();
            let mut order: Vec<usize> = (0..28).collect();
            order.sort_by(|&a, &b| days[b].0.total_cmp(&days[a].0));
            for (d, &(y, fiber5, calories)) in days.iter().enumerate() {
                let peak = order[..3].contains(&d);
                if rng.random_bool(if peak { p1 } else { p0 }) {
                    writeln!(
                        csv,
                        "w{:03},{},{y:.6},{},{fiber5:.6},{calories:.6},{bmi5:.6},{age10:.6},{aa},{other},{cycle}",
                        w + 1,
                        cycle * 28 + d + 1,
                        u8::from(peak)
                    )
                    .unwrap();
                }
            }
        }
    }
    std::fs::write(dir.join("hormone_analog.csv"), csv)?;

    let cols = ["1", "fiber5", "calories", "bmi5", "age10", "aa", "other", "cycle2"];
    let config = serde_json::json!({
        "family": "gaussian",
        "response": "log_lh",
        "id": "id",
        "time": "day",
        "aux": "peak",
        "mean": cols,
        "w1": cols,
        "w2": cols,
        "h": "identity",
        "design": { "level": "observation", "probs": { "*": [p1, p0] } },
        "working": "independence",
        "estimator": "sor"
    });
    std::fs::write(dir.join("hormone_analog.json"), serde_json::to_string_pretty(&config).unwrap() + "\n")
}

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("demo");
    std::fs::create_dir_all(&dir)?;
    adhd(&dir)?;
    hormone(&dir)?;
    println!("wrote demo files to {}", dir.display());
    Ok(())
}
