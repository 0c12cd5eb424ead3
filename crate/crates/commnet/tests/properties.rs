//! Property-based tests over random processes.

mod common;

use commnet::ast::{
    desugar, flatten, free_channels, fresh_channel, normalize, substitute, ChannelId,
    Substitution,
};
use commnet::dsl::{parse_process, pretty};
use commnet::net::{to_net, to_process};
use proptest::prelude::*;

proptest! {
    #[test]
    fn desugar_is_core_and_preserves_free_channels(p in common::arb_process()) {
        let core = desugar(&p);
        prop_assert!(core.is_core());
        prop_assert_eq!(free_channels(&core), free_channels(&p));
    }

    #[test]
    fn normalize_is_idempotent(p in common::arb_process()) {
        let once = normalize(&p);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn normalize_preserves_free_channels(p in common::arb_process()) {
        prop_assert_eq!(free_channels(&normalize(&p)), free_channels(&p));
    }

    #[test]
    fn pretty_parse_roundtrip(p in common::arb_process()) {
        let text = pretty(&p);
        let back = parse_process(&text).expect("pretty output parses");
        prop_assert_eq!(back, p);
    }

    #[test]
    fn net_roundtrip_is_normalization(p in common::arb_process()) {
        prop_assert_eq!(to_process(&to_net(&p)), normalize(&p));
    }

    #[test]
    fn flatten_roundtrip_normalizes(p in common::arb_process()) {
        prop_assert_eq!(normalize(&flatten(&p).to_process()), normalize(&p));
    }

    #[test]
    fn substituting_absent_channel_is_identity(p in common::arb_process()) {
        let avoid = free_channels(&p);
        let absent = fresh_channel(&ChannelId::new("z"), &avoid);
        let sub = Substitution::single(absent, ChannelId::new("a"));
        prop_assert_eq!(substitute(&p, &sub), p);
    }

    #[test]
    fn renaming_respects_binders(p in common::arb_process()) {
        // Renaming a free channel never changes the bound structure:
        // normal forms stay equal after renaming both sides' free sets
        // consistently away from the pool.
        let free = free_channels(&p);
        if let Some(ch) = free.iter().next().cloned() {
            let fresh = fresh_channel(&ChannelId::new("w"), &free);
            let sub = Substitution::single(ch.clone(), fresh.clone());
            let renamed = substitute(&p, &sub);
            let mut new_free = free.clone();
            new_free.remove(&ch);
            new_free.insert(fresh);
            prop_assert_eq!(free_channels(&renamed), new_free);
        }
    }
}
