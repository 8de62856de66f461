use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Rng;

const FIRST_NAMES: &[&str] = &[
    "Aaron", "Abigail", "Adrian", "Aiden", "Alana", "Albert", "Alice", "Amara", "Amelia", "Andre", "Angela",
    "Arthur", "Ava", "Beatrice", "Benjamin", "Bianca", "Brandon", "Brooke", "Caleb", "Camila", "Carlos",
    "Caroline", "Cecilia", "Charles", "Chloe", "Claire", "Connor", "Daisy", "Damian", "Daniel", "Delia",
    "Diego", "Dorothy", "Dylan", "Edgar", "Eleanor", "Elena", "Elijah", "Emily", "Ethan", "Evelyn", "Felix",
    "Fiona", "Frances", "Gabriel", "Grace", "Gregory", "Hannah", "Harold", "Hazel", "Henry", "Ingrid",
    "Isaac", "Isabel", "Ivan", "Jack", "Jasmine", "Jasper", "Julia", "Julian", "Kai", "Karen", "Keith",
    "Laura", "Leah", "Leon", "Lillian", "Lucas", "Lucy", "Malcolm", "Margaret", "Marcus", "Maya", "Miles",
    "Mina", "Nadia", "Nathan", "Nina", "Noah", "Nora", "Oliver", "Olivia", "Oscar", "Paige", "Patrick",
    "Penelope", "Quentin", "Rachel", "Raymond", "Rebecca", "Riley", "Rosa", "Ruby", "Samuel", "Sara",
    "Sebastian", "Sofia", "Stella", "Theo", "Tessa", "Thomas", "Uma", "Victor", "Violet", "Walter", "Wendy",
    "Xavier", "Yara", "Yusuf", "Zachary", "Zoe",
];

const LAST_NAMES: &[&str] = &[
    "Abbott", "Acosta", "Adler", "Alvarez", "Archer", "Ashby", "Baker", "Barnes", "Bauer", "Bennett",
    "Bishop", "Blake", "Bowen", "Brennan", "Brooks", "Burke", "Caldwell", "Carter", "Castillo", "Chandler",
    "Chen", "Clarke", "Cole", "Conway", "Cooper", "Crane", "Dalton", "Dawson", "Delgado", "Dixon", "Doyle",
    "Duncan", "Ellis", "Emerson", "Evans", "Farley", "Fischer", "Fleming", "Ford", "Foster", "Garrett",
    "Gibson", "Gomez", "Graham", "Griffin", "Hale", "Hansen", "Harper", "Hayes", "Holt", "Hughes", "Ingram",
    "Jensen", "Keller", "Kemp", "Kim", "Lambert", "Larsen", "Levin", "Lowell", "Lynch", "Maddox", "Marsh",
    "Mendez", "Mercer", "Monroe", "Morgan", "Nash", "Nguyen", "Norris", "Novak", "Oakley", "Ortiz", "Owens",
    "Palmer", "Patel", "Pearce", "Perry", "Quinn", "Ramos", "Reed", "Reyes", "Rhodes", "Riley", "Rowe",
    "Sanders", "Santos", "Shaw", "Silva", "Sloan", "Stone", "Sutton", "Tanaka", "Thorne", "Torres",
    "Tucker", "Vance", "Vargas", "Walsh", "Warren", "Weber", "Whitaker", "Wolfe", "Yates", "Young", "Zamora",
];

/// One fictional name / number pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhonebookRecord {
    pub name: String,
    pub number: String,
}

impl PhonebookRecord {
    pub fn new(name: impl Into<String>, number: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let number = number.into();
        if name.trim().is_empty() || name.contains('?') || name.contains('\n') {
            return Err(Error::invalid(format!("unusable name {name:?}")));
        }
        if !is_valid_number(&number) {
            return Err(Error::invalid(format!("number {number:?} is not XXX-XXX-XXXX")));
        }
        Ok(Self { name, number })
    }

    /// The prompt half of the QA line.
    pub fn question(&self) -> String {
        format!("Question: What is the phone number of {}?", self.name)
    }

    /// `Question: What is the phone number of {name}? Answer: {number}`
    pub fn qa_line(&self) -> String {
        format!("{} Answer: {}", self.question(), self.number)
    }

    /// Parses a line produced by [`PhonebookRecord::qa_line`].
    pub fn parse_qa_line(line: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("not a phonebook QA line: {line:?}"));
        let rest = line
            .trim_end()
            .strip_prefix("Question: What is the phone number of ")
            .ok_or_else(bad)?;
        let (name, number) = rest.split_once("? Answer: ").ok_or_else(bad)?;
        Self::new(name, number)
    }

    /// The ten digits, separators removed.
    pub fn digits(&self) -> [u8; 10] {
        let mut out = [0u8; 10];
        for (slot, d) in out.iter_mut().zip(self.number.bytes().filter(u8::is_ascii_digit)) {
            *slot = d - b'0';
        }
        out
    }

    pub fn tokens(&self) -> usize {
        token_count(&self.qa_line())
    }
}

/// `XXX-XXX-XXXX` with ASCII digits.
pub fn is_valid_number(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 12
        && b.iter().enumerate().all(|(i, c)| match i {
            3 | 7 => *c == b'-',
            _ => c.is_ascii_digit(),
        })
}

/// Whitespace token count.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn number(rng: &mut Rng) -> String {
    // area code and exchange follow the NANP rule of a leading 2-9
    let mut d = |lo: u64| (b'0' + (lo + rng.below(10 - lo)) as u8) as char;
    let mut s = String::with_capacity(12);
    for (i, lo) in [2, 0, 0, 2, 0, 0, 0, 0, 0, 0].into_iter().enumerate() {
        if i == 3 || i == 6 {
            s.push('-');
        }
        s.push(d(lo));
    }
    s
}

/// Deterministic list of `n` records with unique names.
///
/// Names combine a first and last name; once a draw collides, a middle
/// initial is added, which extends the name space well past any desk-scale
/// load.
pub fn gen_phonebook(n: usize, seed: u64) -> Result<Vec<PhonebookRecord>> {
    if n == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    let capacity = FIRST_NAMES.len() * LAST_NAMES.len() * 27;
    if n > capacity / 2 {
        return Err(Error::invalid(format!("at most {} unique names available", capacity / 2)));
    }
    let mut rng = Rng::stream(seed, 0x5048_4F4E_4542_4F4F);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let first = FIRST_NAMES[rng.below(FIRST_NAMES.len() as u64) as usize];
        let last = LAST_NAMES[rng.below(LAST_NAMES.len() as u64) as usize];
        let mut name = format!("{first} {last}");
        if seen.contains(&name) {
            let initial = (b'A' + rng.below(26) as u8) as char;
            name = format!("{first} {initial}. {last}");
            if seen.contains(&name) {
                continue;
            }
        }
        seen.insert(name.clone());
        out.push(PhonebookRecord {
            name,
            number: number(&mut rng),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use regex::Regex;

    #[test]
    fn numbers_match_north_american_format() {
        let re = Regex::new(r"^\d{3}-\d{3}-\d{4}$").unwrap();
        for r in gen_phonebook(2000, 1).unwrap() {
            assert!(re.is_match(&r.number), "{}", r.number);
            assert!(is_valid_number(&r.number));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_phonebook(50, 9).unwrap(), gen_phonebook(50, 9).unwrap());
        assert_ne!(gen_phonebook(50, 9).unwrap(), gen_phonebook(50, 10).unwrap());
    }

    #[test]
    fn thousand_unique_names() {
        let records = gen_phonebook(1000, 3).unwrap();
        let mut names: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 1000);
    }

    #[test]
    fn qa_line_round_trip_and_tokens() {
        let r = PhonebookRecord::new("Ada Lovelace", "212-555-0199").unwrap();
        assert_eq!(
            r.qa_line(),
            "Question: What is the phone number of Ada Lovelace? Answer: 212-555-0199"
        );
        assert_eq!(r.tokens(), 11);
        assert_eq!(PhonebookRecord::parse_qa_line(&r.qa_line()).unwrap(), r);
        assert_eq!(r.digits(), [2, 1, 2, 5, 5, 5, 0, 1, 9, 9]);
        assert!(PhonebookRecord::parse_qa_line("Question: huh").is_err());
        assert!(PhonebookRecord::new("X", "2125550199").is_err());
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(gen_phonebook(0, 0).is_err());
    }
}
