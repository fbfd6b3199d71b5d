use cotrel::cot::{conform_chain, mandatory_prefix, validate_template, CotTemplate, Provenance, TemplateRegistry};
use cotrel::taxonomy::{QuestionType, SqId, SubQuestionBank, Taxonomy, TypeId};
use proptest::prelude::*;

fn taxonomy() -> Taxonomy {
    Taxonomy::builtin()
        .extend(QuestionType::custom("Clock", "reading clocks", Some("TR")))
        .unwrap()
        .extend(QuestionType::custom("WallClock", "wall clocks", Some("Clock")))
        .unwrap()
        .extend(QuestionType::custom("Loose", "no parent", None))
        .unwrap()
}

fn ids() -> Vec<&'static str> {
    vec!["od", "ev", "ol", "cd", "sd", "rd", "kr", "srd", "tid", "sid"]
}

fn any_type() -> impl Strategy<Value = TypeId> {
    let names: Vec<TypeId> = taxonomy().types().iter().map(|t| t.id.clone()).collect();
    prop::sample::select(names)
}

#[test]
fn prefixes_follow_the_root_type() {
    let tax = taxonomy();
    let p = |t: &str| -> Vec<String> {
        mandatory_prefix(&TypeId::from(t), &tax)
            .unwrap()
            .iter()
            .map(|s| s.as_str().to_string())
            .collect()
    };
    assert_eq!(p("WallClock"), ["tid"]);
    assert_eq!(p("GL"), ["sid"]);
    assert_eq!(p("OLR"), ["od", "ev"]);
    assert_eq!(p("Loose"), ["od"]);
    assert_eq!(p("COR"), ["od"]);
}

proptest! {
    #[test]
    fn conformed_chains_are_valid(qt in any_type(), raw in prop::collection::vec(prop::sample::select(ids()), 0..9)) {
        let tax = taxonomy();
        let bank = SubQuestionBank::builtin();
        let raw: Vec<SqId> = raw.into_iter().map(SqId::from).collect();
        let chain = conform_chain(&raw, &qt, &bank, &tax).unwrap();
        let t = CotTemplate { question_type: qt.clone(), chain, version: 2, parent_version: Some(1), provenance: Provenance::BackendProposed };
        prop_assert!(validate_template(&t, &bank, &tax).is_empty(), "{:?}", t.chain);
        // Conforming is idempotent.
        prop_assert_eq!(conform_chain(&t.chain, &qt, &bank, &tax).unwrap(), t.chain);
    }

    #[test]
    fn rollback_restores_the_previous_active_template(
        qt in any_type(),
        chains in prop::collection::vec(prop::collection::vec(prop::sample::select(ids()), 0..6), 1..4),
    ) {
        let tax = taxonomy();
        let bank = SubQuestionBank::builtin();
        let mut reg = TemplateRegistry::seeded(&tax, &bank).unwrap();
        let mut actives = vec![reg.active(&qt).unwrap()];
        for raw in chains {
            let raw: Vec<SqId> = raw.into_iter().map(SqId::from).collect();
            let prev = actives.last().unwrap().version;
            let t = CotTemplate {
                question_type: qt.clone(),
                chain: conform_chain(&raw, &qt, &bank, &tax).unwrap(),
                version: reg.next_version(&qt),
                parent_version: Some(prev),
                provenance: Provenance::BackendProposed,
            };
            reg.activate(t.clone(), &bank, &tax).unwrap();
            prop_assert_eq!(reg.active(&qt).unwrap(), t.clone());
            actives.push(t);
        }
        let text = reg.to_lines();
        prop_assert_eq!(TemplateRegistry::from_lines(&text).unwrap(), reg.clone());
        while actives.len() > 1 {
            actives.pop();
            reg.rollback(&qt).unwrap();
            prop_assert_eq!(reg.active(&qt).unwrap(), actives.last().unwrap().clone());
        }
        prop_assert!(reg.rollback(&qt).is_err());
        // Versions are never reused after a rollback.
        prop_assert!(reg.next_version(&qt) > actives[0].version);
    }
}
