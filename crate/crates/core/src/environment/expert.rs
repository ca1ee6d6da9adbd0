//! Scripted expert that follows an instance's required plan.

use super::QueryInstance;
use crate::encoder::State;
use crate::error::{Error, Result};
use crate::memory::DIGEST_ID;
use crate::supernet::{ActionId, ContainerType, SupernetGraph};

/// Number of plan items already executed, matched in order against the
/// container types recorded in memory.
pub fn plan_progress(graph: &SupernetGraph, state: &State, plan: &[ContainerType]) -> usize {
    let mut k = 0;
    for e in state.memory.entries() {
        if k == plan.len() {
            break;
        }
        if e.container_id == DIGEST_ID {
            continue;
        }
        if let Some(c) = graph.container_index(&e.container_id) {
            if graph.containers()[c].ctype == plan[k] {
                k += 1;
            }
        }
    }
    k
}

/// Tools of a container sharing the highest fidelity, in declaration order.
pub fn best_tools(graph: &SupernetGraph, container: usize) -> Vec<usize> {
    let n = graph.containers()[container].tools.len();
    let top = (0..n).map(|t| graph.tool_spec(container, t).fidelity).fold(f64::NEG_INFINITY, f64::max);
    (0..n).filter(|&t| graph.tool_spec(container, t).fidelity == top).collect()
}

/// Every action the expert considers optimal: the best tools of the
/// successor container matching the next unexecuted plan item, or EarlyExit
/// once the plan is complete. Off-plan states whose remaining plan is
/// unreachable also exit. The expert is indifferent among the returned
/// actions.
pub fn expert_choices(graph: &SupernetGraph, state: &State, instance: &QueryInstance) -> Result<Vec<ActionId>> {
    let plan = instance.plan_types();
    let k = plan_progress(graph, state, &plan);
    if k == plan.len() {
        return Ok(vec![graph.exit_action()]);
    }
    let need = plan[k];
    if !graph.containers().iter().any(|c| c.ctype == need) {
        return Err(Error::PlanNotRealizable(need.to_string()));
    }
    match graph
        .successors(state.position)
        .into_iter()
        .find(|&c| graph.containers()[c].ctype == need)
    {
        Some(c) => Ok(best_tools(graph, c).into_iter().map(|t| graph.invoke_id(c, t)).collect()),
        None => Ok(vec![graph.exit_action()]),
    }
}

/// The first of [`expert_choices`].
pub fn expert_action(graph: &SupernetGraph, state: &State, instance: &QueryInstance) -> Result<ActionId> {
    Ok(expert_choices(graph, state, instance)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Environment, SuiteRecord, ToolBehavior, ToolRegistry, ToolSpec};
    use crate::memory::MemoryEntry;
    use crate::supernet::{build_graph, Position, SupernetSpec};

    fn instance(plan: &[(ContainerType, &str, &str)]) -> QueryInstance {
        QueryInstance::try_from(SuiteRecord {
            id: "t".into(),
            seed: 1,
            query: "q".into(),
            context: String::new(),
            planted: plan.iter().map(|(_, f, v)| (f.to_string(), v.to_string())).collect(),
            required_plan: plan
                .iter()
                .map(|(t, f, _)| crate::environment::PlanStep {
                    ctype: *t,
                    field: f.to_string(),
                })
                .collect(),
            mandatory: None,
        })
        .unwrap()
    }

    #[test]
    fn fresh_state_invokes_best_entry_tool() {
        let env = Environment::standard();
        let inst = instance(&[(ContainerType::Classify, "finding", "edema"), (ContainerType::Segmentation, "size", "small")]);
        let state = inst.initial_state(env.empty_memory());
        let a = expert_action(&env.graph, &state, &inst).unwrap();
        assert_eq!(env.graph.action_name(a), "classify/classify_large");
        let names: Vec<&str> = expert_choices(&env.graph, &state, &inst)
            .unwrap()
            .into_iter()
            .map(|a| env.graph.action_name(a))
            .collect();
        assert_eq!(names, ["classify/classify_large", "classify/classify_base"]);
    }

    #[test]
    fn complete_plan_exits() {
        let env = Environment::standard();
        let inst = instance(&[(ContainerType::Classify, "finding", "edema")]);
        let mut state = inst.initial_state(env.empty_memory());
        state
            .memory
            .append(MemoryEntry {
                container_id: "classify".into(),
                summary: "Classify: edema (1.00)".into(),
                image_ref: None,
                step: 1,
            })
            .unwrap();
        state.position = Position::At(env.graph.container_index("classify").unwrap());
        assert_eq!(expert_action(&env.graph, &state, &inst).unwrap(), env.graph.exit_action());
    }

    #[test]
    fn missing_container_type_is_not_realizable() {
        let mut reg = ToolRegistry::default();
        reg.register(ToolSpec::new("c", ContainerType::Classify, ToolBehavior::Decode, 1.0, 1)).unwrap();
        reg.register(ToolSpec::new("s", ContainerType::Segmentation, ToolBehavior::Decode, 1.0, 1)).unwrap();
        let spec = SupernetSpec::from_json(
            r#"{"containers":[{"id":"a","ctype":"Classify","tools":["c"]},{"id":"b","ctype":"Segmentation","tools":["s"]}],
                "edges":[{"from":"a","to":"b","routing":"all"}],"entry":"a"}"#,
        )
        .unwrap();
        let g = build_graph(&spec, &reg).unwrap();
        let inst = instance(&[(ContainerType::Report, "impression", "new")]);
        let state = inst.initial_state(crate::memory::Memory::default());
        assert!(matches!(expert_action(&g, &state, &inst), Err(Error::PlanNotRealizable(_))));
    }
}
