/// Built-in lexical themes: label, two answer words, and 24 content words.
/// Words `0..12` belong to the first answer, `12..24` to the second.
pub(super) struct Theme {
    pub label: &'static str,
    pub answers: [&'static str; 2],
    pub words: [&'static str; 24],
}

pub(super) const THEMES: [Theme; 8] = [
    Theme {
        label: "astronomy",
        answers: ["bright", "dim"],
        words: [
            "orbit", "comet", "nebula", "quasar", "pulsar", "galaxy", "meteor", "eclipse", "zenith", "aurora",
            "corona", "solstice", "asteroid", "parsec", "redshift", "telescope", "equinox", "perihelion", "magnetar",
            "exoplanet", "lunar", "stellar", "cosmos", "supernova",
        ],
    },
    Theme {
        label: "cooking",
        answers: ["sweet", "savory"],
        words: [
            "flour", "whisk", "oven", "simmer", "saucepan", "ladle", "knead", "braise", "skillet", "marinade",
            "zest", "glaze", "garlic", "shallot", "broth", "roast", "saute", "paprika", "thyme", "colander",
            "grill", "dough", "caramel", "vinegar",
        ],
    },
    Theme {
        label: "music",
        answers: ["major", "minor"],
        words: [
            "violin", "chord", "tempo", "sonata", "cello", "melody", "octave", "rhythm", "trumpet", "harmony",
            "concerto", "cadence", "piano", "fugue", "bassoon", "timbre", "overture", "staccato", "oboe",
            "crescendo", "arpeggio", "tuba", "lyric", "symphony",
        ],
    },
    Theme {
        label: "sports",
        answers: ["win", "loss"],
        words: [
            "goal", "referee", "stadium", "sprint", "dribble", "penalty", "tackle", "marathon", "racket", "umpire",
            "inning", "relay", "javelin", "hurdle", "league", "offside", "slalom", "wicket", "rebound", "derby",
            "podium", "medal", "coach", "playoff",
        ],
    },
    Theme {
        label: "medicine",
        answers: ["acute", "chronic"],
        words: [
            "vaccine", "fever", "surgeon", "biopsy", "insulin", "artery", "scalpel", "dosage", "antibody", "clinic",
            "symptom", "ward", "plasma", "tumor", "stethoscope", "allergy", "pharmacy", "suture", "cardiac",
            "nurse", "therapy", "fracture", "pulse", "diagnosis",
        ],
    },
    Theme {
        label: "law",
        answers: ["guilty", "innocent"],
        words: [
            "verdict", "statute", "plaintiff", "subpoena", "attorney", "jury", "appeal", "tribunal", "affidavit",
            "testimony", "bailiff", "indictment", "contract", "tort", "lawsuit", "magistrate", "clause", "felony",
            "parole", "warrant", "docket", "probate", "litigant", "precedent",
        ],
    },
    Theme {
        label: "gardening",
        answers: ["sunny", "shady"],
        words: [
            "compost", "trowel", "seedling", "mulch", "hedge", "tulip", "prune", "orchard", "fertilizer",
            "greenhouse", "shovel", "bulb", "perennial", "trellis", "weed", "rake", "sapling", "fern", "ivy",
            "hydrangea", "topsoil", "sprinkler", "lavender", "bonsai",
        ],
    },
    Theme {
        label: "computing",
        answers: ["fast", "slow"],
        words: [
            "compiler", "kernel", "bytecode", "cache", "thread", "socket", "pointer", "register", "bitmask",
            "firmware", "debugger", "mutex", "router", "packet", "checksum", "daemon", "scheduler", "bootloader",
            "syscall", "hashmap", "opcode", "runtime", "allocator", "pipeline",
        ],
    },
];

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "xe", "zo", "bi"];

/// Theme for tasks past the built-in list: pronounceable words that carry
/// the task index, so pools of different tasks never overlap.
pub(super) fn synthetic_theme(task: usize) -> (String, [String; 2], Vec<String>) {
    let words = (0..24)
        .map(|j| format!("{}{}q{task}", SYLLABLES[j % 12], SYLLABLES[j / 12 + 2 * (task % 5)]))
        .collect();
    (
        format!("task{task}"),
        [format!("yes{task}"), format!("no{task}")],
        words,
    )
}
