//! Loss values and gradient check for the five head objectives.
use hodbench::domain::ProbabilityVector;
use hodbench::heads::{
    finite_diff_grad, hod_loss, loss_gradient, relative_error, ClassLayout, ClassifierHead, LossKind,
};

fn main() -> hodbench::Result<()> {
    // two inliers (0, 1), two outliers (10, 11); uniform prediction
    let layout = ClassLayout::fine(vec![0, 1], vec![10, 11]);
    let p = ProbabilityVector(vec![0.25; 4]);
    for label in [0, 10] {
        println!("label {label:>2}: hod {:.6}  fine-only {:.6}", hod_loss(&layout, &p, label, 0.1)?, hod_loss(&layout, &p, label, 0.0)?);
    }

    let feature = [0.3, -1.2, 0.8];
    for kind in [LossKind::CeInlierOnly, LossKind::Oe, LossKind::RejectBucket, LossKind::FineOnly, LossKind::Hod] {
        let layout = match kind {
            LossKind::CeInlierOnly | LossKind::Oe => ClassLayout::inlier_only(vec![0, 1]),
            LossKind::RejectBucket => ClassLayout::reject(vec![0, 1], vec![10, 11]),
            _ => ClassLayout::fine(vec![0, 1], vec![10, 11]),
        };
        let head = ClassifierHead::new(layout, kind, feature.len(), 0, 7)?;
        let (label, is_outlier) = if kind == LossKind::CeInlierOnly { (1, false) } else { (11, true) };
        let (loss, g) = loss_gradient(&head, &feature, label, is_outlier)?;
        let fd = finite_diff_grad(&head, &feature, label, is_outlier, 1e-5)?;
        println!("{kind:>14}: loss {loss:.6}  rel.err vs central differences {:.2e}", relative_error(&g.flatten(), &fd.flatten()));
    }
    Ok(())
}
