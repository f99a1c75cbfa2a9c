//! Threshold-free OOD metrics on hand-made scores.
use hodbench::metrics::{aupr_in, auroc, fpr_at_tpr, roc_curve};

fn main() -> hodbench::Result<()> {
    // U scores: higher means "more outlier"
    let inl = [0.05, 0.1, 0.2, 0.4, 0.6];
    let out = [0.3, 0.5, 0.7, 0.9];
    println!("auroc      {:.4}", auroc(&inl, &out)?);
    println!("fpr@95tpr  {:.4}", fpr_at_tpr(&inl, &out, 0.95)?);
    println!("aupr-in    {:.4}", aupr_in(&inl, &out)?);
    for (fpr, tpr) in roc_curve(&inl, &out)? {
        println!("  fpr {fpr:.2} tpr {tpr:.2}");
    }
    println!("separated {} / one swap {} / identical {}", auroc(&[0.0, 0.1], &[0.8, 0.9])?, auroc(&[0.1, 0.6], &[0.5, 0.9])?, auroc(&[0.3], &[0.3])?);
    Ok(())
}
