//! A small deterministic MultiWOZ-like world: a database, an ontology, a TOD
//! dialog generator, intent pools, a mock search index and template-driven
//! synthesis backends. Everything is a pure function of its seed.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::{BackendConfig, BackendKind, TemplateStub};
use crate::corpus::{BeliefState, Dialog, DomainGoal, GoalCard, Mode, Ontology, Turn};
use crate::evalkit::{DialogPrediction, TurnPrediction};
use crate::intent::{build_balanced_mix, train_detector, DetectorConfig, IntentDetector, LabeledSource};
use crate::knowledge::{matching_records, DBRecord, Database, DefaultRouter, MockSearchProvider};
use crate::pivot::{gold_states, State};
use crate::synthesis::{
    synthesize_corpus, Setting, SynthesisBackends, SynthesisConfig, SynthesisError, SynthesisOutput,
};

pub const AREAS: &[&str] = &["centre", "north", "south", "east", "west"];
pub const FOODS: &[&str] = &["indian", "italian", "chinese", "british", "french", "thai"];
pub const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
pub const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
pub const PLACES: &[&str] =
    &["norwich", "ely", "london kings cross", "stevenage", "peterborough", "leicester", "birmingham new street"];
pub const HUB: &str = "cambridge";

const RESTAURANTS: &[&str] = &[
    "curry garden",
    "pizza hut",
    "golden wok",
    "the copper kettle",
    "midsummer house",
    "saffron brasserie",
    "la margherita",
    "the gardenia",
    "kohinoor",
    "rice house",
    "da vinci pizzeria",
    "bangkok city",
    "the eagle",
    "cote",
    "royal spice",
];
const HOTELS: &[&str] = &[
    "acorn guest house",
    "alpha milton",
    "ashley hotel",
    "gonville hotel",
    "lensfield hotel",
    "the cambridge belfry",
    "university arms",
    "worth house",
    "arbury lodge",
    "hamilton lodge",
];
const ATTRACTIONS: &[(&str, &str)] = &[
    ("kings college", "college"),
    ("christs college", "college"),
    ("great saint marys church", "church"),
    ("all saints church", "church"),
    ("fitzwilliam museum", "museum"),
    ("museum of zoology", "museum"),
    ("scudamores punting", "boat"),
    ("the junction", "theatre"),
    ("byard art", "gallery"),
    ("jesus green outdoor pool", "swimmingpool"),
];

/// Chit-chat utterances, including one from a published fused-dialog example.
pub const ODD_POOL: &[&str] = &[
    "I have been to Norwich a few times. It is beautiful. I hope to go again.",
    "i just got back from a long walk by the river .",
    "have you seen any good movies lately ?",
    "my dog kept me up all night , i am so tired .",
    "i love the smell of fresh bread in the morning .",
    "do you like jazz ? i went to a great concert yesterday .",
    "i have been learning to paint with watercolours .",
    "the weather has been lovely this week , has it not ?",
    "my sister just had a baby girl !",
    "i think autumn is the most beautiful season .",
    "have you ever tried rowing ? it is harder than it looks .",
    "i finished a great novel last night .",
    "what is your favourite kind of music ?",
    "i am so excited about the football match tonight .",
    "my garden is full of tomatoes this year .",
    "i once spent a whole summer cycling around the coast .",
    "do you believe in ghosts ? my old house was creepy .",
    "i am trying to learn the guitar but my fingers hurt .",
    "cats are much better than dogs , do you agree ?",
    "i spent the weekend visiting my grandparents .",
    "i have always wanted to see the northern lights .",
    "my favourite holiday was a week in the mountains .",
    "coffee or tea ? i cannot decide .",
    "i used to collect stamps when i was a child .",
    "the sunset yesterday was absolutely stunning .",
    "i love old churches , they are so peaceful .",
    "i am thinking of adopting a rescue dog .",
    "have you been to any festivals this year ?",
    "my neighbour plays the piano every evening .",
    "i tried baking a cake and it was a disaster , haha .",
    "history is my favourite subject , especially castles .",
    "i watched a documentary about whales yesterday .",
    "do you enjoy hiking ? the hills here are lovely .",
    "i am reading about ancient rome at the moment .",
    "my friends and i play board games every friday .",
    "i really enjoy cooking spicy food at home .",
    "what do you do for fun on weekends ?",
    "i went swimming in the sea last summer , it was freezing .",
    "i have been feeling a bit nostalgic lately .",
    "my brother is a chef and his food is amazing .",
];

/// Task utterances outside the generator's templates, including one from a
/// published fused-dialog example.
pub const TOD_EXTRA: &[&str] = &[
    "Can you find me one that will arrive in Norwich please?",
    "i would like to book a table for two at seven .",
    "can you give me the reference number ?",
    "is there free parking at the hotel ?",
    "please book it for three nights starting on friday .",
    "what time does the last train leave ?",
    "i need the postcode of the museum .",
    "does the restaurant have any availability on sunday ?",
];

const CHAT_TEMPLATES: &[&str] = &[
    "i just got back from a long walk by the river .",
    "have you seen any good movies lately ?",
    "i love the smell of fresh bread in the morning .",
    "do you like jazz ? i went to a great concert yesterday .",
    "the weather has been lovely this week , has it not ?",
    "i finished a great novel last night .",
    "i am so excited about the football match tonight .",
    "have you ever tried rowing ? it is harder than it looks .",
    "what do you do for fun on weekends ?",
];
const PERSONA_TEMPLATES: &[&str] =
    &["hi there ! {persona}", "hello ! {persona} what about you ?", "good morning ! {persona}"];
const USER_TEMPLATES: &[&str] = &[
    "i have been to {goal} a few times . it is beautiful . i hope to go again .",
    "that is interesting . what else do you know about that ?",
    "really ? i did not know that , tell me more .",
    "i would love to hear more about {goal} someday .",
    "haha , that is funny . i enjoy hiking on weekends .",
];
const SYSTEM_TEMPLATES: &[&str] = &[
    "oh , nice ! {knowledge}",
    "i see . do you travel often ?",
    "that sounds lovely . {knowledge}",
    "tell me more about that !",
];
const TRANSITION_TEMPLATES: &[&str] = &[
    "speaking of which , is there anything i can help you plan ?",
    "sounds fun ! by the way , how can i help you today ?",
    "that is great . shall we sort out your plans now ?",
];

fn phone(rng: &mut ChaCha8Rng) -> String {
    format!("01223{:06}", rng.gen_range(0..1_000_000))
}

fn postcode(rng: &mut ChaCha8Rng) -> String {
    format!("cb{}{}{}", rng.gen_range(1..6), rng.gen_range(1..10), ["aa", "bh", "dp", "eq", "rn"][rng.gen_range(0..5)])
}

fn address(rng: &mut ChaCha8Rng) -> String {
    let streets = ["regent street", "hills road", "trumpington street", "mill road", "king street", "bridge street"];
    format!("{} {}", rng.gen_range(1..120), streets[rng.gen_range(0..streets.len())])
}

fn time(rng: &mut ChaCha8Rng) -> String {
    format!("{:02}:{:02}", rng.gen_range(5..23), [0, 15, 30, 45][rng.gen_range(0..4)])
}

/// The fixture database.
pub fn database() -> Database {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdb);
    let mut db = Database::new();
    for name in RESTAURANTS {
        db.insert(
            DBRecord::new("restaurant")
                .with("name", name)
                .with("area", AREAS.choose(&mut rng).unwrap())
                .with("food", FOODS.choose(&mut rng).unwrap())
                .with("pricerange", PRICES.choose(&mut rng).unwrap())
                .with("phone", &phone(&mut rng))
                .with("address", &address(&mut rng))
                .with("postcode", &postcode(&mut rng)),
        );
    }
    for name in HOTELS {
        db.insert(
            DBRecord::new("hotel")
                .with("name", name)
                .with("area", AREAS.choose(&mut rng).unwrap())
                .with("pricerange", PRICES.choose(&mut rng).unwrap())
                .with("type", if name.contains("house") || name.contains("lodge") { "guesthouse" } else { "hotel" })
                .with("stars", &rng.gen_range(2..6).to_string())
                .with("phone", &phone(&mut rng))
                .with("address", &address(&mut rng))
                .with("postcode", &postcode(&mut rng)),
        );
    }
    for (name, kind) in ATTRACTIONS {
        db.insert(
            DBRecord::new("attraction")
                .with("name", name)
                .with("type", kind)
                .with("area", AREAS.choose(&mut rng).unwrap())
                .with("phone", &phone(&mut rng))
                .with("address", &address(&mut rng))
                .with("postcode", &postcode(&mut rng)),
        );
    }
    let mut id = 1000;
    for day in DAYS {
        for place in PLACES {
            for (from, to) in [(HUB, *place), (*place, HUB)] {
                let leave = time(&mut rng);
                let (h, m) = (leave[..2].parse::<u32>().unwrap(), leave[3..].parse::<u32>().unwrap());
                let mins = h * 60 + m + rng.gen_range(30..150);
                id += rng.gen_range(7..60);
                db.insert(
                    DBRecord::new("train")
                        .with("trainid", &format!("TR{id}"))
                        .with("departure", from)
                        .with("destination", to)
                        .with("day", day)
                        .with("leaveat", &leave)
                        .with("arriveby", &format!("{:02}:{:02}", (mins / 60) % 24, mins % 60))
                        .with("price", &format!("{}.{:02} pounds", rng.gen_range(4..40), rng.gen_range(0..100))),
                );
            }
        }
    }
    db
}

fn taxi_places() -> Vec<&'static str> {
    RESTAURANTS.iter().chain(HOTELS).copied().chain(ATTRACTIONS.iter().map(|(n, _)| *n)).collect()
}

/// Ontology covering every informable value of the fixture database plus
/// the taxi domain.
pub fn ontology() -> Ontology {
    let db = database();
    let mut values: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for (domain, records) in &db.tables {
        for r in records {
            for (slot, v) in &r.attributes {
                if matches!(slot.as_str(), "phone" | "address" | "postcode" | "price" | "trainid") {
                    continue;
                }
                let e = values.entry((domain.clone(), slot.clone())).or_default();
                if !e.contains(v) {
                    e.push(v.clone());
                }
            }
        }
    }
    let mut o = Ontology::default();
    for ((d, s), v) in values {
        o.insert(&d, &s, v);
    }
    let places: Vec<String> = taxi_places().iter().map(|s| s.to_string()).collect();
    o.insert("taxi", "departure", places.clone());
    o.insert("taxi", "destination", places);
    o.insert("taxi", "leaveat", (6..22).map(|h| format!("{h:02}:00")).collect::<Vec<_>>());
    o
}

struct Builder<'a> {
    db: &'a Database,
    rng: ChaCha8Rng,
    turns: Vec<Turn>,
    belief: BeliefState,
    goal: GoalCard,
}

impl Builder<'_> {
    fn user(&mut self, text: String, domain: &str) {
        self.turns.push(Turn::user(text, Mode::Tod).with_domain(domain));
    }

    fn system(&mut self, delex: &str, record: Option<&DBRecord>, extra: &[(&str, String)], domain: &str) {
        let mut text = match record {
            Some(r) => crate::corpus::lexicalize(delex, r),
            None => delex.to_string(),
        };
        for (ph, v) in extra {
            text = text.replacen(ph, v, 1);
        }
        self.turns
            .push(Turn::system(text, Mode::Tod).with_delex(delex).with_domain(domain).with_belief(self.belief.clone()));
    }

    fn set(&mut self, domain: &str, slot: &str, value: &str) {
        let mut update = BeliefState::new();
        update.set(domain, slot, value);
        self.belief.merge(&update, Some(domain));
    }

    fn first_match(&self, domain: &str) -> DBRecord {
        (*matching_records(&self.belief, domain, self.db).expect("fixture domain")[0]).clone()
    }

    fn count(&self, domain: &str) -> String {
        matching_records(&self.belief, domain, self.db).expect("fixture domain").len().to_string()
    }

    fn requests(&mut self, options: &[&'static str]) -> Vec<&'static str> {
        let n = self.rng.gen_range(1..=2.min(options.len()));
        let mut picked: Vec<&'static str> = options.choose_multiple(&mut self.rng, n).copied().collect();
        picked.sort_by_key(|s| options.iter().position(|o| o == s));
        picked
    }

    fn goal(&mut self, domain: &str, informable: &[(&str, &str)], requestable: &[&str]) {
        self.goal.domains.insert(
            domain.to_string(),
            DomainGoal {
                informable: informable.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                requestable: requestable.iter().map(|s| s.to_string()).collect(),
            },
        );
    }

    fn answer_requests(&mut self, domain: &str, requests: &[&str], record: &DBRecord) {
        let ask = requests.join(" and ");
        self.user(format!("great , what is the {ask} ?"), domain);
        let parts: Vec<String> = requests.iter().map(|r| format!("the {r} is [{domain}_{r}]")).collect();
        self.system(&format!("{} .", parts.join(" and ")), Some(record), &[], domain);
    }

    fn restaurant(&mut self, opener: &str) {
        let target = self.db.tables["restaurant"].choose(&mut self.rng).unwrap().clone();
        let (food, price, area) =
            (target.get("food").unwrap(), target.get("pricerange").unwrap(), target.get("area").unwrap());
        self.user(format!("{opener}i am looking for a {price} restaurant that serves {food} food ."), "restaurant");
        self.set("restaurant", "food", food);
        self.set("restaurant", "pricerange", price);
        let n = self.count("restaurant");
        self.system(
            "i have [value_count] options . which area do you prefer ?",
            None,
            &[("[value_count]", n)],
            "restaurant",
        );
        self.user(format!("the {area} please ."), "restaurant");
        self.set("restaurant", "area", area);
        let offer = self.first_match("restaurant");
        self.system(
            "[restaurant_name] is in the [value_area] . would you like their details ?",
            Some(&offer),
            &[],
            "restaurant",
        );
        let req = self.requests(&["phone", "address", "postcode"]);
        self.answer_requests("restaurant", &req, &offer);
        self.goal("restaurant", &[("food", food), ("pricerange", price), ("area", area)], &req);
    }

    fn hotel(&mut self, opener: &str) {
        let target = self.db.tables["hotel"].choose(&mut self.rng).unwrap().clone();
        let (area, price) = (target.get("area").unwrap(), target.get("pricerange").unwrap());
        self.user(format!("{opener}i need a place to stay in the {area} , in the {price} price range ."), "hotel");
        self.set("hotel", "area", area);
        self.set("hotel", "pricerange", price);
        let offer = self.first_match("hotel");
        self.system(
            "how about [hotel_name] ? it has [value_count] stars .",
            Some(&offer),
            &[("[value_count]", offer.get("stars").unwrap().to_string())],
            "hotel",
        );
        let req = self.requests(&["address", "phone", "postcode"]);
        self.answer_requests("hotel", &req, &offer);
        self.goal("hotel", &[("area", area), ("pricerange", price)], &req);
    }

    fn attraction(&mut self, opener: &str) {
        let target = self.db.tables["attraction"].choose(&mut self.rng).unwrap().clone();
        let (kind, area) = (target.get("type").unwrap(), target.get("area").unwrap());
        self.user(format!("{opener}can you recommend a {kind} in the {area} ?"), "attraction");
        self.set("attraction", "type", kind);
        self.set("attraction", "area", area);
        let offer = self.first_match("attraction");
        self.system("[attraction_name] is a great [value_type] in the [value_area] .", Some(&offer), &[], "attraction");
        let req = self.requests(&["postcode", "phone", "address"]);
        self.answer_requests("attraction", &req, &offer);
        self.goal("attraction", &[("type", kind), ("area", area)], &req);
    }

    fn train(&mut self, opener: &str) {
        let target = self.db.tables["train"].choose(&mut self.rng).unwrap().clone();
        let (dep, dest, day, leave) = (
            target.get("departure").unwrap(),
            target.get("destination").unwrap(),
            target.get("day").unwrap(),
            target.get("leaveat").unwrap(),
        );
        self.user(format!("{opener}i need a train from {dep} to {dest} on {day} ."), "train");
        self.set("train", "departure", dep);
        self.set("train", "destination", dest);
        self.set("train", "day", day);
        let n = self.count("train");
        self.system(
            "there are [value_count] trains . when would you like to leave ?",
            None,
            &[("[value_count]", n)],
            "train",
        );
        self.user(format!("i want to leave at {leave} ."), "train");
        self.set("train", "leaveat", leave);
        let offer = self.first_match("train");
        self.system("[train_id] leaves at [value_time] and arrives by [value_time] .", Some(&offer), &[], "train");
        self.user("how much is a ticket ?".to_string(), "train");
        self.system("it costs [value_price] .", Some(&offer), &[], "train");
        self.goal(
            "train",
            &[("departure", dep), ("destination", dest), ("day", day), ("leaveat", leave)],
            &["trainid", "price"],
        );
    }

    fn taxi(&mut self, opener: &str) {
        let places = taxi_places();
        let from = *places.choose(&mut self.rng).unwrap();
        let to = loop {
            let p = *places.choose(&mut self.rng).unwrap();
            if p != from {
                break p;
            }
        };
        let at = format!("{:02}:00", self.rng.gen_range(6..22));
        self.user(format!("{opener}i need a taxi from {from} to {to} ."), "taxi");
        self.set("taxi", "departure", from);
        self.set("taxi", "destination", to);
        self.system("what time would you like to leave ?", None, &[], "taxi");
        self.user(format!("i want to leave at {at} ."), "taxi");
        self.set("taxi", "leaveat", &at);
        let number = phone(&mut self.rng);
        self.system(
            "your taxi is booked . the contact number is [taxi_phone] .",
            None,
            &[("[taxi_phone]", number)],
            "taxi",
        );
        self.goal("taxi", &[("departure", from), ("destination", to), ("leaveat", &at)], &["phone"]);
    }
}

/// One TOD dialog with one or two domains, a goal card, beliefs on every
/// system turn and delexicalized system responses.
pub fn tod_dialog(id: &str, rng: &mut ChaCha8Rng, db: &Database) -> Dialog {
    let mut b = Builder {
        db,
        rng: ChaCha8Rng::seed_from_u64(rng.gen()),
        turns: Vec::new(),
        belief: BeliefState::new(),
        goal: GoalCard::default(),
    };
    let first = ["restaurant", "hotel", "attraction", "train"][b.rng.gen_range(0..4)];
    let second = if b.rng.gen_bool(0.7) {
        let options: Vec<&str> =
            ["restaurant", "hotel", "attraction", "train", "taxi"].into_iter().filter(|d| *d != first).collect();
        Some(options[b.rng.gen_range(0..options.len())])
    } else {
        None
    };
    for (i, domain) in std::iter::once(first).chain(second).enumerate() {
        let opener = if i == 0 { "" } else { "thanks . also , " };
        match domain {
            "restaurant" => b.restaurant(opener),
            "hotel" => b.hotel(opener),
            "attraction" => b.attraction(opener),
            "train" => b.train(opener),
            _ => b.taxi(opener),
        }
    }
    let last = second.unwrap_or(first);
    b.user("thank you , that is all i need .".to_string(), last);
    b.system("you are welcome . goodbye !", None, &[], last);
    let mut d = Dialog::new(id, b.turns);
    d.goal_card = Some(b.goal);
    d
}

/// `n` TOD dialogs named `tod-{seed}-{i}`.
pub fn tod_corpus(n: usize, seed: u64) -> Vec<Dialog> {
    let db = database();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| tod_dialog(&format!("tod-{seed}-{i:04}"), &mut rng, &db)).collect()
}

/// A TOD source from generated user turns and an ODD source from
/// [`ODD_POOL`].
pub fn intent_sources(seed: u64) -> Vec<LabeledSource> {
    let mut tod: Vec<(String, Mode)> = tod_corpus(80, seed)
        .iter()
        .flat_map(|d| d.turns.iter().filter(|t| t.is_user()).map(|t| t.text.clone()).collect::<Vec<_>>())
        .map(|u| (u, Mode::Tod))
        .collect();
    tod.sort();
    tod.dedup();
    tod.extend(TOD_EXTRA.iter().map(|u| (u.to_string(), Mode::Tod)));
    vec![
        LabeledSource { name: "fixture-tod".into(), examples: tod },
        LabeledSource {
            name: "fixture-odd".into(),
            examples: ODD_POOL.iter().map(|u| (u.to_string(), Mode::Odd)).collect(),
        },
    ]
}

/// Linear detector trained on a balanced mix of [`intent_sources`].
pub fn intent_detector() -> IntentDetector {
    let mix = build_balanced_mix(&intent_sources(11), 11).expect("fixture sources have both classes");
    train_detector(&mix, &DetectorConfig::default(), 11).expect("fixture mix is large enough")
}

/// Mock search index over a few place and topic names.
pub fn search_table() -> BTreeMap<String, Vec<String>> {
    [
        (
            "norwich",
            &["Norwich is a cathedral city in Norfolk, England", "Norwich Cathedral was completed in 1145"][..],
        ),
        ("cambridge", &["Cambridge is a university city on the River Cam"]),
        ("ely", &["Ely is a cathedral city in Cambridgeshire"]),
        ("centre", &["The city centre is home to most of the colleges"]),
        ("museum", &["The Fitzwilliam Museum holds art and antiquities"]),
        ("indian", &["Indian cuisine is known for its use of spices"]),
        ("italian", &["Italian cuisine is famous for pasta and pizza"]),
        ("college", &["The colleges of Cambridge date back to the 13th century"]),
    ]
    .into_iter()
    .map(|(q, s)| (q.to_string(), s.iter().map(|x| x.to_string()).collect()))
    .collect()
}

pub fn search_provider() -> MockSearchProvider {
    MockSearchProvider::from_map(search_table())
}

pub fn router() -> DefaultRouter {
    DefaultRouter::new(database(), Box::new(search_provider()))
}

fn role_templates() -> [(&'static str, Vec<&'static str>); 4] {
    [
        ("chat", CHAT_TEMPLATES.iter().chain(PERSONA_TEMPLATES).copied().collect()),
        ("user", USER_TEMPLATES.to_vec()),
        ("system", SYSTEM_TEMPLATES.to_vec()),
        ("transition", TRANSITION_TEMPLATES.to_vec()),
    ]
}

/// Template-driven backends for every synthesis role.
pub fn synthesis_backends() -> SynthesisBackends {
    let [chat, user, system, transition] = role_templates().map(|(name, t)| {
        Arc::new(TemplateStub::new(t).named(&format!("fixture-{name}"))) as Arc<dyn crate::backends::Backend>
    });
    SynthesisBackends { chat, user, system, transition, search: Some(Arc::new(search_provider())) }
}

/// Registry entries equivalent to [`synthesis_backends`], one per role name.
pub fn backend_configs() -> Vec<BackendConfig> {
    role_templates()
        .into_iter()
        .map(|(name, t)| BackendConfig {
            name: name.to_string(),
            kind: Some(BackendKind::ScriptedStub),
            templates: t.into_iter().map(str::to_string).collect(),
            ..Default::default()
        })
        .collect()
}

/// Synthesizes `setting` over `tod_corpus(n, seed)`.
pub fn fused_corpus(setting: Setting, n: usize, seed: u64) -> Result<SynthesisOutput, SynthesisError> {
    let config = SynthesisConfig::new(setting, seed);
    synthesize_corpus(&tod_corpus(n, seed), &config, &synthesis_backends(), &intent_detector(), &ontology(), 1)
}

/// Totals for a corpus built by [`corpus_with_totals`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusTotals {
    pub dialogs: usize,
    pub mode_switches: usize,
    pub odd_turns: usize,
    pub tod_turns: usize,
    pub odd_tokens: usize,
    pub tod_tokens: usize,
}

fn spread(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    (0..parts).map(move |i| total / parts + usize::from(i < total % parts))
}

fn utterance(len: usize, word: &str) -> String {
    vec![word; len].join(" ")
}

/// Dialogs hitting the given totals exactly. Exchanges are grouped into
/// alternating mode blocks so each dialog has its share of the switches;
/// token totals are spread over utterances. Panics when a dialog cannot hold
/// its share of switches.
pub fn corpus_with_totals(t: &CorpusTotals) -> Vec<Dialog> {
    let switches: Vec<usize> = spread(t.mode_switches, t.dialogs).collect();
    let odd: Vec<usize> = spread(t.odd_turns, t.dialogs).collect();
    let tod: Vec<usize> = spread(t.tod_turns, t.dialogs).collect();
    let mut odd_len = spread(t.odd_tokens, 2 * t.odd_turns);
    let mut tod_len = spread(t.tod_tokens, 2 * t.tod_turns);
    (0..t.dialogs)
        .map(|i| {
            let s = switches[i];
            let start_odd = s % 2 == 1;
            let blocks = s + 1;
            let n_odd_blocks = if start_odd { blocks.div_ceil(2) } else { blocks / 2 };
            let n_tod_blocks = blocks - n_odd_blocks;
            assert!(odd[i] >= n_odd_blocks && tod[i] >= n_tod_blocks, "dialog {i} cannot hold {s} switches");
            let mut odd_sizes = spread(odd[i], n_odd_blocks);
            let mut tod_sizes = spread(tod[i], n_tod_blocks);
            let mut turns = Vec::new();
            for b in 0..blocks {
                let mode = if (b % 2 == 0) == start_odd { Mode::Odd } else { Mode::Tod };
                let n = if mode == Mode::Odd { odd_sizes.next().unwrap() } else { tod_sizes.next().unwrap() };
                for _ in 0..n {
                    for user in [true, false] {
                        let len = if mode == Mode::Odd { odd_len.next().unwrap() } else { tod_len.next().unwrap() };
                        let text = utterance(len, if mode == Mode::Odd { "chat" } else { "task" });
                        let mut turn = if user { Turn::user(text, mode) } else { Turn::system(text, mode) };
                        if mode == Mode::Tod && !user {
                            turn = turn.with_belief(BeliefState::new());
                        }
                        turns.push(turn);
                    }
                }
            }
            Dialog::new(format!("stats-{i}"), turns)
        })
        .collect()
}

/// A randomized evaluation case: gold fused dialogs with goal cards and
/// noisy predictions for every system turn.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub golds: Vec<Dialog>,
    pub preds: Vec<DialogPrediction>,
    pub db: Database,
}

const NOISE_RESPONSES: &[&str] = &[
    "[restaurant_name] is nice . the phone is [restaurant_phone] .",
    "[hotel_name] has [value_count] stars . it is at [hotel_address] .",
    "[attraction_name] is open today . postcode [attraction_postcode] .",
    "[train_id] leaves at [value_time] and costs [value_price] .",
    "your taxi is booked . the contact number is [taxi_phone] .",
    "the postcode is [restaurant_postcode] and the address is [restaurant_address] .",
    "that is lovely , tell me more !",
    "i am not sure about that .",
];

fn perturb(belief: &BeliefState, rng: &mut ChaCha8Rng) -> BeliefState {
    let mut out = BeliefState::new();
    for (domain, slots) in belief.iter() {
        if rng.gen_bool(0.1) {
            continue;
        }
        for (slot, value) in slots {
            match rng.gen_range(0..10) {
                0 => {}
                1 => out.set(domain, slot.as_str(), "dontcare"),
                2 => out.set(domain, slot.as_str(), *AREAS.choose(rng).unwrap()),
                _ => out.set(domain, slot.as_str(), value.as_str()),
            }
        }
    }
    out
}

/// Up to `max_dialogs` gold dialogs with random ODD exchanges inserted, and
/// predictions mixing gold and noisy states and responses.
pub fn random_eval_case(seed: u64, max_dialogs: usize) -> EvalCase {
    let db = database();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_dialogs.max(1));
    let mut golds = Vec::with_capacity(n);
    for i in 0..n {
        let tod = tod_dialog(&format!("case-{seed}-{i}"), &mut rng, &db);
        let p_odd = [0.0, 0.2, 0.4][rng.gen_range(0..3)];
        let mut turns = Vec::new();
        for pair in tod.turns.chunks(2) {
            if rng.gen_bool(p_odd) {
                for k in 0..rng.gen_range(1..3) {
                    let user = ODD_POOL.choose(&mut rng).unwrap();
                    turns.push(Turn::user(*user, Mode::Odd));
                    let mut sys = Turn::system(*SYSTEM_TEMPLATES.choose(&mut rng).unwrap(), Mode::Odd);
                    if k == 0 && rng.gen_bool(0.3) {
                        sys = sys.transition();
                    }
                    turns.push(sys);
                }
            }
            turns.extend(pair.iter().cloned());
        }
        golds.push(Dialog { turns, ..tod });
    }
    let mut preds = Vec::with_capacity(n);
    for g in &golds {
        let states = gold_states(g).expect("fixture dialogs are annotated");
        let p_flip = [0.0, 0.15, 0.5][rng.gen_range(0..3)];
        let turns = states
            .into_iter()
            .map(|(i, gold)| {
                let turn = &g.turns[i];
                let state = if rng.gen_bool(0.03) {
                    None
                } else if rng.gen_bool(p_flip) {
                    Some(match gold.mode() {
                        Mode::Tod => State::Odd(String::new()),
                        Mode::Odd => State::Tod(BeliefState::new()),
                    })
                } else {
                    Some(match gold {
                        State::Tod(b) => State::Tod(if rng.gen_bool(0.3) { perturb(&b, &mut rng) } else { b }),
                        odd => odd,
                    })
                };
                let response = if rng.gen_bool(0.6) {
                    crate::evalkit::reference_text(turn).to_string()
                } else {
                    NOISE_RESPONSES.choose(&mut rng).unwrap().to_string()
                };
                TurnPrediction { turn_index: i, state, response }
            })
            .collect();
        preds.push(DialogPrediction { dialog_id: g.id.clone(), turns });
    }
    EvalCase { golds, preds, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::compute_stats;

    #[test]
    fn tod_dialogs_are_valid_and_annotated() {
        let onto = ontology();
        for d in tod_corpus(40, 5) {
            d.validate().unwrap();
            assert!(gold_states(&d).is_ok());
            for t in d.turns.iter().filter(|t| t.is_system()) {
                onto.validate_belief(&d.id, t.belief.as_ref().unwrap()).unwrap();
            }
            assert!(!d.goal_card.as_ref().unwrap().domains.is_empty());
        }
        assert_eq!(tod_corpus(3, 9), tod_corpus(3, 9));
    }

    #[test]
    fn totals_are_exact() {
        let t = CorpusTotals {
            dialogs: 7,
            mode_switches: 20,
            odd_turns: 30,
            tod_turns: 40,
            odd_tokens: 1000,
            tod_tokens: 1500,
        };
        let s = compute_stats(&corpus_with_totals(&t)).unwrap();
        assert_eq!(
            (s.n_dialogs, s.total_mode_switches, s.total_odd_turns, s.total_tod_turns, s.odd_tokens, s.tod_tokens),
            (7, 20, 30, 40, 1000, 1500)
        );
    }

    #[test]
    fn detector_separates_pools() {
        let det = intent_detector();
        assert_eq!(det.detect(ODD_POOL[0]).unwrap().0, Mode::Odd);
        assert_eq!(det.detect("i need a train from norwich to cambridge on friday .").unwrap().0, Mode::Tod);
        let all: Vec<_> = intent_sources(3)
            .iter()
            .flat_map(|s| s.examples.iter().map(|(u, l)| crate::intent::IntentExample::new(u, *l, &s.name)))
            .collect();
        assert!(det.accuracy(&all) > 0.9);
        for t in CHAT_TEMPLATES {
            assert_eq!(det.detect(t).unwrap().0, Mode::Odd, "{t}");
        }
    }
}
