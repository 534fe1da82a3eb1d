//! Property tests for the oracle subgoal generator.

mod common;

use autoimprove::rng::seeded;
use autoimprove::sim::{make_scene, Action, GridPos, SceneState};
use autoimprove::subgoal::{
    final_goal, placement_target, waypoint_plan, OracleSubgoalGenerator, SubgoalGenerator,
    SubgoalNoise, Waypoint, STAGES,
};
use autoimprove::task::Target;
use proptest::prelude::*;

use common::*;

fn walk(seed: u64, steps: usize) -> SceneState {
    let mut rng = seeded(seed);
    let mut s = make_scene(&desk(), seed).unwrap();
    for _ in 0..steps {
        s.apply(Action::random(&mut rng));
    }
    s
}

fn noisy() -> SubgoalNoise {
    SubgoalNoise {
        perturb_prob: 0.5,
        max_offset: 2,
        hallucination_prob: 0.2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn subgoals_are_valid_states_under_noise(seed in any::<u64>(), steps in 0usize..300) {
        let s = walk(seed, steps);
        let generator = OracleSubgoalGenerator::new(desk().home, noisy());
        let mut rng = seeded(seed);
        for task in desk().tasks().unwrap() {
            for stage in 0..STAGES {
                let g = generator.next_subgoal(&s, &task, stage, &mut rng).unwrap();
                let v = g.invariant_violations();
                prop_assert!(v.is_empty(), "stage {} of {}: {:?}", stage, task.language, v);
                prop_assert_eq!(g.objects.len(), s.objects.len());
                prop_assert_eq!(&g.containers, &s.containers);
                prop_assert_eq!(&g.barriers, &s.barriers);
            }
        }
    }

    #[test]
    fn placing_stages_satisfy_the_task(seed in any::<u64>(), steps in 0usize..300) {
        let s = walk(seed, steps);
        let home = desk().home;
        let noise = SubgoalNoise { hallucination_prob: 0.0, ..noisy() };
        let generator = OracleSubgoalGenerator::new(home, noise);
        let mut rng = seeded(seed);
        for task in desk().tasks().unwrap() {
            for stage in [3, 4] {
                let g = generator.next_subgoal(&s, &task, stage, &mut rng).unwrap();
                prop_assert!(task.is_satisfied(&g).unwrap(), "stage {} of {}", stage, task.language);
                prop_assert!(g.holding.is_none());
            }
            let last = final_goal(&s, &task, home).unwrap();
            prop_assert!(task.is_satisfied(&last).unwrap());
            prop_assert_eq!(last.gripper, home);
        }
    }

    #[test]
    fn each_stage_is_reachable_from_the_previous_one(seed in any::<u64>(), steps in 0usize..300) {
        let s = walk(seed, steps);
        let generator = OracleSubgoalGenerator::new(desk().home, SubgoalNoise::off());
        let mut rng = seeded(seed);
        for task in desk().tasks().unwrap() {
            let mut prev = s.clone();
            for stage in 0..STAGES {
                let g = generator.next_subgoal(&prev, &task, stage, &mut rng).unwrap();
                prop_assert!(
                    prev.reachable_from(prev.gripper).contains(&g.gripper),
                    "stage {} gripper {:?} unreachable from {:?}", stage, g.gripper, prev.gripper
                );
                prev = g;
            }
        }
    }

    #[test]
    fn displaced_objects_are_absorbed(seed in any::<u64>(), x in 0i32..4, y in 3i32..8) {
        let s = make_scene(&desk(), seed).unwrap();
        let task = &desk().tasks().unwrap()[0];
        let to = GridPos::new(x, y);
        prop_assume!(s.is_free_table_cell(to, Some(&task.object)));
        let mut moved = s.clone();
        moved.objects.get_mut(&task.object).unwrap().pos = to;
        let generator = OracleSubgoalGenerator::new(desk().home, SubgoalNoise::off());
        let mut rng = seeded(seed);
        let reach = generator.next_subgoal(&moved, task, 0, &mut rng).unwrap();
        prop_assert_eq!(reach.gripper, to);
        let grasp = generator.next_subgoal(&moved, task, 1, &mut rng).unwrap();
        prop_assert_eq!(grasp.holding.as_deref(), Some(task.object.as_str()));
        prop_assert_eq!(grasp.objects[&task.object].pos, to);
    }
}

#[test]
fn plan_has_five_stages_with_resolved_targets() {
    let s = make_scene(&desk(), 1).unwrap();
    for task in desk().tasks().unwrap() {
        let plan = waypoint_plan(&s, &task).unwrap();
        assert_eq!(plan.stages.len(), 5);
        assert_eq!(plan.stages[0], Waypoint::ReachObject);
        assert_eq!(plan.stages[4], Waypoint::ReturnHome);
        assert_eq!(plan.target, placement_target(&s, &task).unwrap());
        match &task.target {
            Target::Container(c) if task.language.starts_with("put") => {
                assert_eq!(plan.target, s.containers[c].pos)
            }
            Target::Region(r) => assert!(r.contains(plan.target)),
            _ => assert!(s.is_free_table_cell(plan.target, Some(&task.object))),
        }
    }
}

#[test]
fn stage_index_out_of_range_is_rejected() {
    let s = make_scene(&desk(), 0).unwrap();
    let task = &desk().tasks().unwrap()[0];
    let generator = OracleSubgoalGenerator::new(desk().home, SubgoalNoise::off());
    assert!(generator.next_subgoal(&s, task, STAGES, &mut seeded(0)).is_err());
}
