mod common;

use noisy_icl::corpus::TaskTemplate;
use noisy_icl::rectifier::{parse_completion, parse_rectifier_prompt};

#[test]
fn prompts_match_goldens() {
    for (name, text) in common::golden_renders() {
        let expected = std::fs::read_to_string(common::golden_dir().join(name)).unwrap();
        assert_eq!(text, expected, "golden {name}");
    }
}

#[test]
fn rect_golden_parses_back() {
    let dir = common::golden_dir();
    let prompt = std::fs::read_to_string(dir.join("rect-v1-prompt.txt")).unwrap();
    let blocks = parse_rectifier_prompt(&prompt).unwrap();
    assert_eq!(blocks.len(), 3);
    assert_eq!(blocks[1], "Tweet: Go back where you came from\nHate: Yes");
    let completion = std::fs::read_to_string(dir.join("rect-v1-completion.txt")).unwrap();
    let parsed = parse_completion(&TaskTemplate::tweet(), &completion, 3);
    assert_eq!(parsed, vec![Some(0), Some(1), Some(0)]);
}
