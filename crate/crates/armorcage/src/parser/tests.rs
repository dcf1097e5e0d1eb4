use std::path::PathBuf;

use super::*;
use crate::policy::ExecMode;

fn corpus_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../profiles")
}

fn corpus_resolver() -> IncludeResolver {
    IncludeResolver::new(vec![corpus_root()])
}

fn parse_corpus_file(name: &str) -> ProfileSet {
    let path = corpus_root().join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    parse_profiles(&text, name, &corpus_resolver()).unwrap()
}

/// In-memory resolver with empty abstraction stubs and the shipped tunables,
/// for tests that must not depend on the filesystem.
fn memory_resolver() -> IncludeResolver {
    let mut resolver = IncludeResolver::empty();
    resolver.preload("tunables/global", "@{HOME}=/home/*/ /root/\n");
    resolver.preload("abstractions/base", "# empty\n");
    resolver.preload("abstractions/nameservice", "# empty\n");
    resolver
}

#[test]
fn corpus_structure_counts() {
    let set = parse_corpus_file("r-base");
    let p = set.get("r-base").unwrap();
    assert_eq!(p.rules.len(), 13);
    assert_eq!(p.includes.len(), 2);
    assert_eq!(p.capabilities.len(), 0);
    assert_eq!(p.hats.len(), 0);

    let set = parse_corpus_file("r-compile");
    let p = set.get("r-compile").unwrap();
    assert_eq!(p.rules.len(), 15);

    let set = parse_corpus_file("r-user");
    let p = set.get("r-user").unwrap();
    assert_eq!(p.rules.len(), 19);
    assert_eq!(
        p.capabilities.iter().map(|c| c.name()).collect::<Vec<_>>(),
        vec!["kill", "net_bind_service", "sys_tty_config"]
    );

    let set = parse_corpus_file("testprofile");
    let p = set.get("testprofile").unwrap();
    assert_eq!(p.rules.len(), 1);
    assert_eq!(p.hats.len(), 1);
    assert!(p.hats["testhat"].rules.is_empty());
}

#[test]
fn corpus_round_trips() {
    for name in ["r-base", "r-compile", "r-user", "testprofile"] {
        let resolver = corpus_resolver();
        let first = parse_corpus_file(name);
        let text1 = serialize_set(&first);
        let second = parse_profiles(&text1, name, &resolver)
            .unwrap_or_else(|e| panic!("reparse of serialized {name} failed: {e}"));
        assert_eq!(first, second, "parse-serialize-parse differs for {name}");
        let text2 = serialize_set(&second);
        assert_eq!(text1, text2, "serialized form of {name} is not stable");
    }
}

#[test]
fn one_line_profile_reports_unknown_mode_on_line_one() {
    let err = parse_profiles(
        "profile p { /etc/passwd rq, }",
        "inline",
        &IncludeResolver::empty(),
    )
    .unwrap_err();
    assert_eq!(err.line, 1);
    assert!(err.message.contains("unknown mode 'q'"), "{}", err.message);
}

#[test]
fn missing_trailing_comma() {
    let err = parse_profiles(
        "profile p {\n        /etc/passwd r\n}\n",
        "inline",
        &IncludeResolver::empty(),
    )
    .unwrap_err();
    assert_eq!(err.line, 2);
    assert!(
        err.message.contains("missing trailing ','"),
        "{}",
        err.message
    );
}

#[test]
fn unresolved_include_strict_vs_lenient() {
    let text = "profile p {\n        #include <abstractions/missing>\n        /a r,\n}\n";
    let err = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap_err();
    assert_eq!(err.line, 2);
    assert!(err.message.contains("unresolved include"));

    let (set, warnings) = parse_profiles_with(
        text,
        "inline",
        &IncludeResolver::empty(),
        ParseOptions {
            strict_includes: false,
        },
    )
    .unwrap();
    assert_eq!(warnings.len(), 1);
    let p = set.get("p").unwrap();
    assert_eq!(p.includes, vec!["abstractions/missing".to_string()]);
    assert_eq!(p.rules.len(), 1);
}

#[test]
fn unbalanced_braces() {
    let err = parse_profiles(
        "profile p {\n        /a r,\n",
        "inline",
        &IncludeResolver::empty(),
    )
    .unwrap_err();
    assert!(err.message.contains("unbalanced braces"), "{}", err.message);

    let err = parse_profiles("}\n", "inline", &IncludeResolver::empty()).unwrap_err();
    assert!(err.message.contains("unbalanced '}'"), "{}", err.message);
}

#[test]
fn duplicate_profile_identity() {
    let err = parse_profiles(
        "profile p {\n}\nprofile p {\n}\n",
        "inline",
        &IncludeResolver::empty(),
    )
    .unwrap_err();
    assert!(err.message.contains("duplicate profile identity 'p'"));
}

#[test]
fn nested_hats_rejected() {
    let err = parse_profiles(
        "profile p {\n        ^h {\n                ^g {\n                }\n        }\n}\n",
        "inline",
        &IncludeResolver::empty(),
    )
    .unwrap_err();
    assert_eq!(err.line, 3);
    assert!(err.message.contains("nested"), "{}", err.message);
}

#[test]
fn change_profile_and_flags() {
    let text =
        "profile p flags=(complain) {\n        change_profile -> r-user,\n        /a r,\n}\n";
    let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
    let p = set.get("p").unwrap();
    assert_eq!(p.mode, ProfileMode::Complain);
    assert_eq!(p.transitions, vec!["r-user".to_string()]);

    // The flag survives a round trip.
    let reparsed =
        parse_profiles(&serialize_set(&set), "inline", &IncludeResolver::empty()).unwrap();
    assert_eq!(set, reparsed);
}

#[test]
fn attached_profile_header() {
    let text = "/usr/bin/R {\n        /etc/R/* r,\n}\n";
    let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
    let p = set.get("/usr/bin/R").unwrap();
    assert!(p.identity.is_attached());
}

#[test]
fn serialized_modes_are_canonical() {
    let text = "profile p {\n        /a mr,\n        /b rix,\n}\n";
    let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
    let p = set.get("p").unwrap();
    assert_eq!(serialize_rule(&p.rules[0]), "/a rm,");
    assert_eq!(serialize_rule(&p.rules[1]), "/b rix,");
}

#[test]
fn hat_serialization_uses_caret_blocks() {
    let set = parse_corpus_file("testprofile");
    let text = serialize_profile(set.get("testprofile").unwrap());
    assert!(text.contains("^testhat {"), "{text}");
}

#[test]
fn variables_from_tunables_feed_patterns() {
    let text = "#include <tunables/global>\nprofile p {\n        @{HOME}/R/** rw,\n}\n";
    let set = parse_profiles(text, "inline", &memory_resolver()).unwrap();
    let p = set.get("p").unwrap();
    assert!(p.rules[0].pattern.matches("/home/u/R/x"));
    assert!(p.rules[0].pattern.matches("/root/R/x"));
}

#[test]
fn lint_finds_write_map_hazard() {
    let set = parse_corpus_file("r-compile");
    let diags = lint_profiles(&set);
    let hazards: Vec<_> = diags
        .iter()
        .filter(|d| d.kind == DiagnosticKind::WritableExecutableOverlap)
        .collect();
    assert_eq!(hazards.len(), 1);
    assert!(
        hazards[0].message.contains("/tmp/**"),
        "{}",
        hazards[0].message
    );

    let set = parse_corpus_file("r-base");
    let diags = lint_profiles(&set);
    assert!(diags
        .iter()
        .all(|d| d.kind != DiagnosticKind::WritableExecutableOverlap));
}

#[test]
fn lint_finds_unresolved_transition() {
    let text = "profile p {\n        change_profile -> ghost,\n        /a r,\n}\n";
    let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
    let diags = lint_profiles(&set);
    assert!(diags
        .iter()
        .any(|d| d.kind == DiagnosticKind::UnresolvedTransition && d.message.contains("ghost")));
}

#[test]
fn lint_finds_unresolved_px_attachment() {
    let text = "profile p {\n        /usr/bin/R px,\n}\n";
    let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
    let diags = lint_profiles(&set);
    assert!(diags
        .iter()
        .any(|d| d.kind == DiagnosticKind::UnresolvedPxAttachment));

    let text = "profile p {\n        /usr/bin/R px,\n}\n/usr/bin/R {\n        /etc/R/* r,\n}\n";
    let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
    let diags = lint_profiles(&set);
    assert!(diags
        .iter()
        .all(|d| d.kind != DiagnosticKind::UnresolvedPxAttachment));
}

/// Single-character corruptions of a valid corpus file either still parse or
/// report their error on the corrupted line. The corruption alphabet avoids
/// newline (which renumbers lines) and '#' (which comments the line out and
/// surfaces elsewhere); corrupting the `#include` keyword itself likewise
/// demotes the line to a comment rather than corrupting it in place, so
/// those bytes are excluded too.
#[test]
fn corruption_reports_the_corrupted_line() {
    let resolver = memory_resolver();
    for name in ["r-base", "r-compile", "r-user", "testprofile"] {
        let path = corpus_root().join(name);
        let text = std::fs::read_to_string(&path).unwrap();
        let bytes = text.as_bytes();
        let mut in_include_keyword = vec![false; bytes.len()];
        let mut search = 0;
        while let Some(found) = text[search..].find("#include") {
            let start = search + found;
            in_include_keyword[start..start + "#include".len()]
                .iter_mut()
                .for_each(|b| *b = true);
            search = start + "#include".len();
        }
        for pos in 0..bytes.len() {
            if bytes[pos] == b'\n' || in_include_keyword[pos] {
                continue;
            }
            let line_of_pos = 1 + text[..pos].bytes().filter(|&b| b == b'\n').count();
            for corruption in *b"xq!0" {
                if bytes[pos] == corruption {
                    continue;
                }
                let mut corrupted = bytes.to_vec();
                corrupted[pos] = corruption;
                let corrupted = String::from_utf8(corrupted).unwrap();
                if let Err(err) = parse_profiles(&corrupted, name, &resolver) {
                    assert_eq!(
                        err.line, line_of_pos,
                        "{name}: corrupting byte {pos} ('{}' -> '{}') reported line {} not {}: {}",
                        bytes[pos] as char, corruption as char, err.line, line_of_pos, err.message
                    );
                }
            }
        }
    }
}

#[test]
fn parsing_is_pure_given_resolver_snapshot() {
    let text = std::fs::read_to_string(corpus_root().join("r-user")).unwrap();
    let resolver = memory_resolver();
    let a = parse_profiles(&text, "r-user", &resolver).unwrap();
    let b = parse_profiles(&text, "r-user", &resolver).unwrap();
    assert_eq!(a, b);
}

#[test]
fn px_exec_mode_parsed() {
    let text = "profile p {\n        /usr/bin/R px,\n}\n";
    let set = parse_profiles(text, "inline", &IncludeResolver::empty()).unwrap();
    let modes = set.get("p").unwrap().rules[0].modes;
    assert_eq!(modes.exec_modes(), vec![ExecMode::Discrete]);
}
