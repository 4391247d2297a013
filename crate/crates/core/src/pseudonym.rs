//! Stable per-coursework pseudonyms ("Amber Otter") shown to peers in place of
//! real names.
//!
//! The n-th enrollment of a coursework gets combination `perm(n)` where
//! `perm` is a seeded affine permutation of the 10,000 adjective/animal
//! pairs, so the first 10,000 pseudonyms never collide. Past that, a numeric
//! round suffix keeps them unique.

const ADJECTIVES: [&str; 100] = [
    "Agile",
    "Amber",
    "Ancient",
    "Arctic",
    "Autumn",
    "Bold",
    "Brave",
    "Breezy",
    "Bright",
    "Brisk",
    "Bronze",
    "Calm",
    "Candid",
    "Cheerful",
    "Clever",
    "Cobalt",
    "Coral",
    "Cosmic",
    "Crimson",
    "Curious",
    "Daring",
    "Dawn",
    "Deft",
    "Dusky",
    "Eager",
    "Electric",
    "Emerald",
    "Fearless",
    "Fierce",
    "Frosty",
    "Gentle",
    "Gilded",
    "Glad",
    "Golden",
    "Graceful",
    "Granite",
    "Hardy",
    "Hazel",
    "Honest",
    "Humble",
    "Icy",
    "Indigo",
    "Ivory",
    "Jade",
    "Jolly",
    "Keen",
    "Kind",
    "Lively",
    "Lucky",
    "Lunar",
    "Mellow",
    "Merry",
    "Misty",
    "Modest",
    "Mossy",
    "Nimble",
    "Noble",
    "Ochre",
    "Olive",
    "Patient",
    "Pearl",
    "Plucky",
    "Polar",
    "Proud",
    "Quick",
    "Quiet",
    "Radiant",
    "Rapid",
    "Rustic",
    "Sandy",
    "Scarlet",
    "Serene",
    "Silent",
    "Silver",
    "Sleek",
    "Smooth",
    "Snowy",
    "Solar",
    "Spry",
    "Steady",
    "Stormy",
    "Sturdy",
    "Sunny",
    "Swift",
    "Tawny",
    "Tidal",
    "Topaz",
    "Tranquil",
    "Umber",
    "Valiant",
    "Velvet",
    "Vivid",
    "Wandering",
    "Warm",
    "Wild",
    "Windy",
    "Wise",
    "Witty",
    "Young",
    "Zesty",
];

const ANIMALS: [&str; 100] = [
    "Albatross",
    "Alpaca",
    "Antelope",
    "Armadillo",
    "Badger",
    "Bat",
    "Beaver",
    "Bison",
    "Bobcat",
    "Buffalo",
    "Camel",
    "Capybara",
    "Caribou",
    "Cheetah",
    "Chipmunk",
    "Condor",
    "Cougar",
    "Coyote",
    "Crane",
    "Crow",
    "Deer",
    "Dingo",
    "Dolphin",
    "Dove",
    "Eagle",
    "Eel",
    "Egret",
    "Elk",
    "Falcon",
    "Ferret",
    "Finch",
    "Flamingo",
    "Fox",
    "Gazelle",
    "Gecko",
    "Gibbon",
    "Giraffe",
    "Goose",
    "Gopher",
    "Hare",
    "Hawk",
    "Hedgehog",
    "Heron",
    "Hippo",
    "Hornet",
    "Ibex",
    "Ibis",
    "Iguana",
    "Impala",
    "Jackal",
    "Jaguar",
    "Jay",
    "Kestrel",
    "Kingfisher",
    "Kiwi",
    "Koala",
    "Lemur",
    "Leopard",
    "Lark",
    "Llama",
    "Lynx",
    "Magpie",
    "Manatee",
    "Marmot",
    "Meerkat",
    "Mink",
    "Mole",
    "Moose",
    "Narwhal",
    "Newt",
    "Ocelot",
    "Octopus",
    "Orca",
    "Osprey",
    "Otter",
    "Owl",
    "Panda",
    "Panther",
    "Parrot",
    "Pelican",
    "Penguin",
    "Puffin",
    "Quail",
    "Rabbit",
    "Raccoon",
    "Raven",
    "Robin",
    "Salmon",
    "Seal",
    "Shrike",
    "Sparrow",
    "Stoat",
    "Swan",
    "Tapir",
    "Tiger",
    "Toucan",
    "Turtle",
    "Walrus",
    "Wombat",
    "Yak",
];

const SPACE: u64 = (ADJECTIVES.len() * ANIMALS.len()) as u64;

/// Generates pseudonyms for one coursework.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudonymGenerator {
    multiplier: u64,
    offset: u64,
}

impl PseudonymGenerator {
    pub fn new(seed: u64) -> Self {
        let mixed = splitmix64(seed);
        // The multiplier must be coprime with 10,000 = 2^4 * 5^4.
        let mut multiplier = (mixed >> 32) % SPACE;
        while multiplier.is_multiple_of(2) || multiplier.is_multiple_of(5) {
            multiplier = (multiplier + 1) % SPACE;
        }
        Self {
            multiplier,
            offset: mixed % SPACE,
        }
    }

    /// The pseudonym for the `index`-th slot of the coursework.
    pub fn nth(&self, index: u64) -> String {
        let round = index / SPACE;
        let slot = (self.multiplier * (index % SPACE) + self.offset) % SPACE;
        let adjective = ADJECTIVES[(slot / ANIMALS.len() as u64) as usize];
        let animal = ANIMALS[(slot % ANIMALS.len() as u64) as usize];
        if round == 0 {
            format!("{adjective} {animal}")
        } else {
            format!("{adjective} {animal} {}", round + 1)
        }
    }

    /// First slot at or after `start` whose pseudonym differs from
    /// `display_name`. Returns the slot used and the pseudonym.
    pub fn assign(&self, start: u64, display_name: &str) -> (u64, String) {
        let mut index = start;
        loop {
            let candidate = self.nth(index);
            if !candidate.eq_ignore_ascii_case(display_name.trim()) {
                return (index, candidate);
            }
            index += 1;
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
