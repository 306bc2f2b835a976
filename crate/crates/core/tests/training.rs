//! Training dynamics on a moderate default-configuration run.

use vsa::dataset::{build_dataset, DatasetSpec};
use vsa::program::{Constraints, QType, QTypeMix};
use vsa::scene::{make_universe, UniverseConfig};
use vsa::trainer::{run_curriculum, CurriculumConfig, LessonConfig};

#[test]
fn lesson_two_loss_trends_down_and_steps_alternate() {
    let u = make_universe(5, UniverseConfig::default()).unwrap();
    let l1 = DatasetSpec {
        scenes: 400,
        max_objects: 5,
        mix: QTypeMix::only(QType::Query),
        constraints: Constraints { max_depth: Some(6), ..Default::default() },
        seed: 5,
        ..Default::default()
    };
    let l2 = DatasetSpec { scenes: 300, seed: 6, id_offset: 10_000, ..Default::default() };
    let train = build_dataset(&u, &l1).unwrap().merged(&build_dataset(&u, &l2).unwrap()).unwrap();
    let val = build_dataset(&u, &DatasetSpec { scenes: 20, seed: 7, id_offset: 20_000, ..Default::default() }).unwrap();
    let cfg = CurriculumConfig {
        lesson1: LessonConfig { epochs: 5, ..CurriculumConfig::default().lesson1 },
        lesson2: LessonConfig { epochs: 10, ..Default::default() },
        replay_lesson1: false,
        seed: 5,
        ..Default::default()
    };
    let mut alternation_gaps = vec![];
    let (_, report) = run_curriculum(&cfg, &u.schema, &train, &val, &mut |r, _| {
        let e = r.epochs.last().unwrap();
        if e.lesson == 2 {
            let l1_steps = r.epochs.iter().filter(|x| x.lesson == 1).map(|x| x.theta_steps).max().unwrap();
            alternation_gaps.push((e.theta_steps - l1_steps).abs_diff(e.phi_steps));
        }
    })
    .unwrap();
    assert!(alternation_gaps.iter().all(|&g| g <= 1), "{alternation_gaps:?}");

    let losses: Vec<f64> = report.epochs.iter().filter(|e| e.lesson == 2).map(|e| e.mean_loss).collect();
    assert_eq!(losses.len(), 10);
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let rises = avg.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "moving averages {avg:?}");
}
