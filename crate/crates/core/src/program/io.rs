use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Answer, Cmp, Program, ProgramError, ProgramStep, QASample, QType, Relation, StepKind};
use crate::scene::AttributeSchema;

/// One line of a QA dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub scene_id: u64,
    pub qtype: QType,
    pub depth: usize,
    pub program: Vec<Value>,
    pub question_text: String,
    pub answer: Value,
}

fn step_json(step: &ProgramStep, schema: &AttributeSchema) -> Value {
    let names = |cs: &[crate::scene::ConceptId]| -> Vec<&str> { cs.iter().map(|&c| schema.concept_name(c)).collect() };
    let (kind, extra) = match &step.kind {
        StepKind::Scene => ("scene", None),
        StepKind::Filter(cs) => ("filter", Some(("concepts", serde_json::json!(names(cs))))),
        StepKind::Relate(r) => ("relate", Some(("relation", serde_json::json!(r.name())))),
        StepKind::Query(a) => ("query", Some(("attribute", serde_json::json!(schema.attr_name(*a))))),
        StepKind::Exist => ("exist", None),
        StepKind::Count => ("count", None),
        StepKind::CompareAttr(a) => ("compare_attr", Some(("attribute", serde_json::json!(schema.attr_name(*a))))),
        StepKind::CompareCount(c) => ("compare_count", Some(("cmp", serde_json::json!(c.symbol())))),
    };
    let mut obj = serde_json::Map::new();
    obj.insert("kind".into(), Value::from(kind));
    if let Some((k, v)) = extra {
        obj.insert(k.into(), v);
    }
    obj.insert("inputs".into(), serde_json::json!(step.inputs));
    Value::Object(obj)
}

fn answer_json(a: &Answer, schema: &AttributeSchema) -> Value {
    match a {
        Answer::Concept(c) => serde_json::json!({"type": "concept", "value": schema.concept_name(*c)}),
        Answer::Integer(n) => serde_json::json!({"type": "integer", "value": n}),
        Answer::Boolean(b) => serde_json::json!({"type": "boolean", "value": b}),
    }
}

pub fn sample_to_json(sample: &QASample, schema: &AttributeSchema) -> String {
    let rec = QaRecord {
        scene_id: sample.scene_id,
        qtype: sample.qtype,
        depth: sample.depth,
        program: sample.program.steps.iter().map(|s| step_json(s, schema)).collect(),
        question_text: sample.question_text.clone(),
        answer: answer_json(&sample.answer, schema),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

fn field<'a>(obj: &'a Value, key: &str, step: usize) -> Result<&'a Value, ProgramError> {
    obj.get(key).ok_or_else(|| ProgramError::Malformed { step, detail: format!("missing field {key:?}") })
}

fn str_field<'a>(obj: &'a Value, key: &str, step: usize) -> Result<&'a str, ProgramError> {
    field(obj, key, step)?.as_str().ok_or_else(|| ProgramError::Malformed { step, detail: format!("field {key:?} must be a string") })
}

fn parse_step(v: &Value, step: usize, schema: &AttributeSchema) -> Result<ProgramStep, ProgramError> {
    let kind_name = str_field(v, "kind", step)?;
    let attr = |key: &str| -> Result<crate::scene::AttrId, ProgramError> {
        let name = str_field(v, key, step)?;
        schema.lookup_attr(name).map_err(|_| ProgramError::UnknownAttribute { token: name.to_string(), step: Some(step) })
    };
    let kind = match kind_name {
        "scene" => StepKind::Scene,
        "filter" => {
            let arr = field(v, "concepts", step)?
                .as_array()
                .ok_or_else(|| ProgramError::Malformed { step, detail: "concepts must be a list".into() })?;
            let mut cs = Vec::with_capacity(arr.len());
            for c in arr {
                let name = c.as_str().ok_or_else(|| ProgramError::Malformed { step, detail: "concept must be a string".into() })?;
                cs.push(
                    schema.lookup_concept(name).map_err(|_| ProgramError::UnknownConcept { token: name.to_string(), step: Some(step) })?,
                );
            }
            StepKind::Filter(cs)
        }
        "relate" => {
            let name = str_field(v, "relation", step)?;
            let rel = Relation::ALL
                .into_iter()
                .find(|r| r.name() == name)
                .ok_or_else(|| ProgramError::Malformed { step, detail: format!("unknown relation {name:?}") })?;
            StepKind::Relate(rel)
        }
        "query" => StepKind::Query(attr("attribute")?),
        "exist" => StepKind::Exist,
        "count" => StepKind::Count,
        "compare_attr" => StepKind::CompareAttr(attr("attribute")?),
        "compare_count" => {
            let sym = str_field(v, "cmp", step)?;
            let cmp = [Cmp::Eq, Cmp::Gt, Cmp::Lt]
                .into_iter()
                .find(|c| c.symbol() == sym)
                .ok_or_else(|| ProgramError::Malformed { step, detail: format!("unknown comparison {sym:?}") })?;
            StepKind::CompareCount(cmp)
        }
        other => return Err(ProgramError::UnknownKind { step, token: other.to_string() }),
    };
    let inputs = field(v, "inputs", step)?
        .as_array()
        .ok_or_else(|| ProgramError::Malformed { step, detail: "inputs must be a list".into() })?
        .iter()
        .map(|x| {
            x.as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| ProgramError::Malformed { step, detail: "slot must be a non-negative integer".into() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProgramStep::new(kind, inputs))
}

fn parse_answer(v: &Value, schema: &AttributeSchema) -> Result<Answer, ProgramError> {
    let tag = v.get("type").and_then(Value::as_str).ok_or_else(|| ProgramError::Json("answer needs a type".into()))?;
    let val = v.get("value").ok_or_else(|| ProgramError::Json("answer needs a value".into()))?;
    match tag {
        "concept" => {
            let name = val.as_str().ok_or_else(|| ProgramError::Json("concept answer must be a string".into()))?;
            schema
                .lookup_concept(name)
                .map(Answer::Concept)
                .map_err(|_| ProgramError::UnknownConcept { token: name.to_string(), step: None })
        }
        "integer" => val
            .as_u64()
            .map(|n| Answer::Integer(n as usize))
            .ok_or_else(|| ProgramError::Json("integer answer must be non-negative".into())),
        "boolean" => val.as_bool().map(Answer::Boolean).ok_or_else(|| ProgramError::Json("boolean answer expected".into())),
        other => Err(ProgramError::Json(format!("unknown answer type {other:?}"))),
    }
}

/// Parses one JSON line. Concepts and attributes are resolved against
/// `schema`; slot references and step types are validated.
pub fn parse_sample(line: &str, schema: &AttributeSchema) -> Result<QASample, ProgramError> {
    let rec: QaRecord = serde_json::from_str(line).map_err(|e| ProgramError::Json(e.to_string()))?;
    let steps = rec.program.iter().enumerate().map(|(i, v)| parse_step(v, i, schema)).collect::<Result<Vec<_>, _>>()?;
    let program = Program::new(steps)?;
    let answer = parse_answer(&rec.answer, schema)?;
    if program.depth() != rec.depth {
        return Err(ProgramError::Json(format!("stored depth {} but program depth is {}", rec.depth, program.depth())));
    }
    Ok(QASample { scene_id: rec.scene_id, qtype: rec.qtype, program, question_text: rec.question_text, answer, depth: rec.depth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::tests::worked_example;

    fn sample() -> (QASample, AttributeSchema) {
        let schema = AttributeSchema::clevr();
        let program = worked_example(&schema);
        let s = QASample {
            scene_id: 3,
            qtype: QType::Query,
            depth: program.depth(),
            program,
            question_text: "q".into(),
            answer: Answer::Concept(schema.lookup_concept("small").unwrap()),
        };
        (s, schema)
    }

    #[test]
    fn round_trip() {
        let (s, schema) = sample();
        let line = sample_to_json(&s, &schema);
        assert_eq!(parse_sample(&line, &schema).unwrap(), s);
    }

    #[test]
    fn unknown_concept_names_token() {
        let (s, schema) = sample();
        let line = sample_to_json(&s, &schema).replace("\"blue\"", "\"redd\"");
        let err = parse_sample(&line, &schema).unwrap_err();
        assert_eq!(err, ProgramError::UnknownConcept { token: "redd".into(), step: Some(1) });
        assert!(err.to_string().contains("redd"));
    }

    #[test]
    fn dangling_reference() {
        let (s, schema) = sample();
        let line = sample_to_json(&s, &schema).replace("\"inputs\":[2]", "\"inputs\":[7]");
        assert_eq!(parse_sample(&line, &schema).unwrap_err(), ProgramError::DanglingReference { step: 3, slot: 7 });
    }

    #[test]
    fn unknown_kind_reports_position() {
        let (s, schema) = sample();
        let line = sample_to_json(&s, &schema).replace("\"relate\"", "\"teleport\"");
        assert_eq!(parse_sample(&line, &schema).unwrap_err(), ProgramError::UnknownKind { step: 2, token: "teleport".into() });
    }

    #[test]
    fn malformed_json() {
        let schema = AttributeSchema::clevr();
        assert!(matches!(parse_sample("{not json", &schema), Err(ProgramError::Json(_))));
    }
}
