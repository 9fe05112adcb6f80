//! Layer graphs of the supported backbones. Layouts follow the common Keras
//! application definitions, with the ImageNet classifier replaced by a
//! `classes`-way dense head named `predictions`.

use crate::nn::{ArchBuilder, Architecture, Layer, Padding, Shape, Window};

const BN_EPS_RESNET: f64 = 1.001e-5;
const BN_EPS: f64 = 1e-3;

fn seq(layers: impl IntoIterator<Item = Layer>) -> Layer {
    Layer::Sequential(layers.into_iter().collect())
}

fn max_pool(k: usize, s: usize, padding: Padding) -> Layer {
    Layer::MaxPool(Window::square(k, s, padding))
}

fn head(b: &mut ArchBuilder, features: usize, classes: usize) -> Layer {
    b.begin_head();
    b.dense("predictions", features, classes)
}

pub fn vgg16(classes: usize) -> Architecture {
    let mut b = ArchBuilder::new();
    let mut layers = Vec::new();
    let mut channels = 3;
    for (i, (convs, width)) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)].into_iter().enumerate() {
        b.begin_block();
        for j in 1..=convs {
            layers.push(b.conv(&format!("block{}_conv{j}", i + 1), channels, width, (3, 3), 1, Padding::Same, 1, true));
            layers.push(Layer::Relu);
            channels = width;
        }
        layers.push(max_pool(2, 2, Padding::Valid));
    }
    layers.push(Layer::Flatten);
    b.begin_block();
    layers.push(b.dense("fc1", 512 * 7 * 7, 4096));
    layers.push(Layer::Relu);
    b.begin_block();
    layers.push(b.dense("fc2", 4096, 4096));
    layers.push(Layer::Relu);
    layers.push(head(&mut b, 4096, classes));
    b.finish(seq(layers), Shape::new(3, 224, 224))
}

fn conv_bn(b: &mut ArchBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: Padding) -> Vec<Layer> {
    vec![
        b.conv(&format!("{name}_conv"), cin, cout, (k, k), stride, pad, 1, true),
        b.batch_norm(&format!("{name}_bn"), cout, true, BN_EPS_RESNET),
    ]
}

fn bottleneck(b: &mut ArchBuilder, name: &str, cin: usize, filters: usize, stride: usize, project: bool) -> Layer {
    let out = 4 * filters;
    let mut body = conv_bn(b, &format!("{name}_1"), cin, filters, 1, stride, Padding::Valid);
    body.push(Layer::Relu);
    body.extend(conv_bn(b, &format!("{name}_2"), filters, filters, 3, 1, Padding::Same));
    body.push(Layer::Relu);
    body.extend(conv_bn(b, &format!("{name}_3"), filters, out, 1, 1, Padding::Valid));
    let shortcut = project.then(|| Box::new(seq(conv_bn(b, &format!("{name}_0"), cin, out, 1, stride, Padding::Valid))));
    seq([Layer::Residual { body: Box::new(seq(body)), shortcut }, Layer::Relu])
}

pub fn resnet50(classes: usize) -> Architecture {
    let mut b = ArchBuilder::new();
    b.begin_block();
    let mut layers = conv_bn(&mut b, "conv1", 3, 64, 7, 2, Padding::Explicit { h: 3, w: 3 });
    layers.push(Layer::Relu);
    layers.push(max_pool(3, 2, Padding::Explicit { h: 1, w: 1 }));
    let mut cin = 64;
    for (stage, (blocks, filters, stride)) in [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)].into_iter().enumerate() {
        for i in 0..blocks {
            b.begin_block();
            let name = format!("conv{}_block{}", stage + 2, i + 1);
            let s = if i == 0 { stride } else { 1 };
            layers.push(bottleneck(&mut b, &name, cin, filters, s, i == 0));
            cin = 4 * filters;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(head(&mut b, 2048, classes));
    b.finish(seq(layers), Shape::new(3, 224, 224))
}

/// Convolution without bias, shift-only batch norm and ReLU.
fn cbr(b: &mut ArchBuilder, name: &str, cin: usize, cout: usize, k: (usize, usize), stride: usize, pad: Padding) -> Layer {
    b.scoped(name, |b| {
        seq([b.conv("conv", cin, cout, k, stride, pad, 1, false), b.batch_norm("bn", cout, false, BN_EPS), Layer::Relu])
    })
}

fn avg_pool_same() -> Layer {
    Layer::AvgPool(Window::square(3, 1, Padding::Same))
}

fn inception_a(b: &mut ArchBuilder, name: &str, cin: usize, pool: usize) -> (Layer, usize) {
    let same = Padding::Same;
    let layer = b.scoped(name, |b| {
        Layer::Concat(vec![
            cbr(b, "branch1x1", cin, 64, (1, 1), 1, same),
            seq([cbr(b, "branch5x5_1", cin, 48, (1, 1), 1, same), cbr(b, "branch5x5_2", 48, 64, (5, 5), 1, same)]),
            seq([
                cbr(b, "branch3x3dbl_1", cin, 64, (1, 1), 1, same),
                cbr(b, "branch3x3dbl_2", 64, 96, (3, 3), 1, same),
                cbr(b, "branch3x3dbl_3", 96, 96, (3, 3), 1, same),
            ]),
            seq([avg_pool_same(), cbr(b, "branch_pool", cin, pool, (1, 1), 1, same)]),
        ])
    });
    (layer, 64 + 64 + 96 + pool)
}

fn inception_b(b: &mut ArchBuilder, name: &str, cin: usize) -> (Layer, usize) {
    let (same, valid) = (Padding::Same, Padding::Valid);
    let layer = b.scoped(name, |b| {
        Layer::Concat(vec![
            cbr(b, "branch3x3", cin, 384, (3, 3), 2, valid),
            seq([
                cbr(b, "branch3x3dbl_1", cin, 64, (1, 1), 1, same),
                cbr(b, "branch3x3dbl_2", 64, 96, (3, 3), 1, same),
                cbr(b, "branch3x3dbl_3", 96, 96, (3, 3), 2, valid),
            ]),
            max_pool(3, 2, valid),
        ])
    });
    (layer, 384 + 96 + cin)
}

fn inception_c(b: &mut ArchBuilder, name: &str, cin: usize, mid: usize) -> (Layer, usize) {
    let same = Padding::Same;
    let layer = b.scoped(name, |b| {
        Layer::Concat(vec![
            cbr(b, "branch1x1", cin, 192, (1, 1), 1, same),
            seq([
                cbr(b, "branch7x7_1", cin, mid, (1, 1), 1, same),
                cbr(b, "branch7x7_2", mid, mid, (1, 7), 1, same),
                cbr(b, "branch7x7_3", mid, 192, (7, 1), 1, same),
            ]),
            seq([
                cbr(b, "branch7x7dbl_1", cin, mid, (1, 1), 1, same),
                cbr(b, "branch7x7dbl_2", mid, mid, (7, 1), 1, same),
                cbr(b, "branch7x7dbl_3", mid, mid, (1, 7), 1, same),
                cbr(b, "branch7x7dbl_4", mid, mid, (7, 1), 1, same),
                cbr(b, "branch7x7dbl_5", mid, 192, (1, 7), 1, same),
            ]),
            seq([avg_pool_same(), cbr(b, "branch_pool", cin, 192, (1, 1), 1, same)]),
        ])
    });
    (layer, 768)
}

fn inception_d(b: &mut ArchBuilder, name: &str, cin: usize) -> (Layer, usize) {
    let (same, valid) = (Padding::Same, Padding::Valid);
    let layer = b.scoped(name, |b| {
        Layer::Concat(vec![
            seq([cbr(b, "branch3x3_1", cin, 192, (1, 1), 1, same), cbr(b, "branch3x3_2", 192, 320, (3, 3), 2, valid)]),
            seq([
                cbr(b, "branch7x7x3_1", cin, 192, (1, 1), 1, same),
                cbr(b, "branch7x7x3_2", 192, 192, (1, 7), 1, same),
                cbr(b, "branch7x7x3_3", 192, 192, (7, 1), 1, same),
                cbr(b, "branch7x7x3_4", 192, 192, (3, 3), 2, valid),
            ]),
            max_pool(3, 2, valid),
        ])
    });
    (layer, 320 + 192 + cin)
}

fn inception_e(b: &mut ArchBuilder, name: &str, cin: usize) -> (Layer, usize) {
    let same = Padding::Same;
    let layer = b.scoped(name, |b| {
        Layer::Concat(vec![
            cbr(b, "branch1x1", cin, 320, (1, 1), 1, same),
            seq([
                cbr(b, "branch3x3_1", cin, 384, (1, 1), 1, same),
                Layer::Concat(vec![
                    cbr(b, "branch3x3_2a", 384, 384, (1, 3), 1, same),
                    cbr(b, "branch3x3_2b", 384, 384, (3, 1), 1, same),
                ]),
            ]),
            seq([
                cbr(b, "branch3x3dbl_1", cin, 448, (1, 1), 1, same),
                cbr(b, "branch3x3dbl_2", 448, 384, (3, 3), 1, same),
                Layer::Concat(vec![
                    cbr(b, "branch3x3dbl_3a", 384, 384, (1, 3), 1, same),
                    cbr(b, "branch3x3dbl_3b", 384, 384, (3, 1), 1, same),
                ]),
            ]),
            seq([avg_pool_same(), cbr(b, "branch_pool", cin, 192, (1, 1), 1, same)]),
        ])
    });
    (layer, 320 + 768 + 768 + 192)
}

pub fn inception_v3(classes: usize) -> Architecture {
    let (same, valid) = (Padding::Same, Padding::Valid);
    let mut b = ArchBuilder::new();
    b.begin_block();
    let mut layers = vec![
        cbr(&mut b, "conv2d_1a", 3, 32, (3, 3), 2, valid),
        cbr(&mut b, "conv2d_2a", 32, 32, (3, 3), 1, valid),
        cbr(&mut b, "conv2d_2b", 32, 64, (3, 3), 1, same),
        max_pool(3, 2, valid),
        cbr(&mut b, "conv2d_3b", 64, 80, (1, 1), 1, valid),
        cbr(&mut b, "conv2d_4a", 80, 192, (3, 3), 1, valid),
        max_pool(3, 2, valid),
    ];
    let mut c = 192;
    let mut push = |b: &mut ArchBuilder, f: &dyn Fn(&mut ArchBuilder, usize) -> (Layer, usize)| {
        b.begin_block();
        let (layer, out) = f(b, c);
        layers.push(layer);
        c = out;
    };
    push(&mut b, &|b, c| inception_a(b, "mixed0", c, 32));
    push(&mut b, &|b, c| inception_a(b, "mixed1", c, 64));
    push(&mut b, &|b, c| inception_a(b, "mixed2", c, 64));
    push(&mut b, &|b, c| inception_b(b, "mixed3", c));
    push(&mut b, &|b, c| inception_c(b, "mixed4", c, 128));
    push(&mut b, &|b, c| inception_c(b, "mixed5", c, 160));
    push(&mut b, &|b, c| inception_c(b, "mixed6", c, 160));
    push(&mut b, &|b, c| inception_c(b, "mixed7", c, 192));
    push(&mut b, &|b, c| inception_d(b, "mixed8", c));
    push(&mut b, &|b, c| inception_e(b, "mixed9", c));
    push(&mut b, &|b, c| inception_e(b, "mixed10", c));
    layers.push(Layer::GlobalAvgPool);
    layers.push(head(&mut b, c, classes));
    b.finish(seq(layers), Shape::new(3, 299, 299))
}

fn inverted_residual(b: &mut ArchBuilder, name: &str, cin: usize, cout: usize, stride: usize, expand: usize) -> Layer {
    let same = Padding::Same;
    let hidden = cin * expand;
    let body = b.scoped(name, |b| {
        let mut body = Vec::new();
        if expand != 1 {
            body.push(b.conv("expand", cin, hidden, (1, 1), 1, same, 1, false));
            body.push(b.batch_norm("expand_bn", hidden, true, BN_EPS));
            body.push(Layer::Relu6);
        }
        body.push(b.conv("depthwise", hidden, hidden, (3, 3), stride, same, hidden, false));
        body.push(b.batch_norm("depthwise_bn", hidden, true, BN_EPS));
        body.push(Layer::Relu6);
        body.push(b.conv("project", hidden, cout, (1, 1), 1, same, 1, false));
        body.push(b.batch_norm("project_bn", cout, true, BN_EPS));
        seq(body)
    });
    if stride == 1 && cin == cout {
        Layer::Residual { body: Box::new(body), shortcut: None }
    } else {
        body
    }
}

pub fn mobilenet_v2(classes: usize) -> Architecture {
    let same = Padding::Same;
    let mut b = ArchBuilder::new();
    b.begin_block();
    let mut layers = vec![
        b.conv("Conv1", 3, 32, (3, 3), 2, same, 1, false),
        b.batch_norm("bn_Conv1", 32, true, BN_EPS),
        Layer::Relu6,
    ];
    b.begin_block();
    layers.push(inverted_residual(&mut b, "expanded_conv", 32, 16, 1, 1));
    let mut cin = 16;
    let mut index = 1;
    for (t, c, n, s) in [(6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)] {
        for i in 0..n {
            b.begin_block();
            let stride = if i == 0 { s } else { 1 };
            layers.push(inverted_residual(&mut b, &format!("block_{index}"), cin, c, stride, t));
            cin = c;
            index += 1;
        }
    }
    b.begin_block();
    layers.push(b.conv("Conv_1", cin, 1280, (1, 1), 1, same, 1, false));
    layers.push(b.batch_norm("Conv_1_bn", 1280, true, BN_EPS));
    layers.push(Layer::Relu6);
    layers.push(Layer::GlobalAvgPool);
    layers.push(head(&mut b, 1280, classes));
    b.finish(seq(layers), Shape::new(3, 224, 224))
}

/// Three conv/pool stages, global pooling and a dense head; ~24k parameters.
pub fn reference_cnn(input: (u32, u32), classes: usize) -> Architecture {
    let same = Padding::Same;
    let mut b = ArchBuilder::new();
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, width) in [16, 32, 64].into_iter().enumerate() {
        b.begin_block();
        layers.push(b.conv(&format!("conv{}", i + 1), cin, width, (3, 3), 1, same, 1, true));
        layers.push(Layer::Relu);
        if i < 2 {
            layers.push(max_pool(2, 2, Padding::Valid));
        }
        cin = width;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(head(&mut b, cin, classes));
    b.finish(seq(layers), Shape::new(3, input.0 as usize, input.1 as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Published totals of the Keras ImageNet models (1000-way head).
    const KERAS_VGG16_TRAINABLE: u64 = 138_357_544;
    const KERAS_RESNET50_TRAINABLE: u64 = 25_583_592;
    const KERAS_RESNET50_TOTAL: u64 = 25_636_712;
    const KERAS_INCEPTION_V3_TRAINABLE: u64 = 23_817_352;
    const KERAS_INCEPTION_V3_TOTAL: u64 = 23_851_784;
    const KERAS_MOBILENET_V2_TRAINABLE: u64 = 3_504_872;
    const KERAS_MOBILENET_V2_TOTAL: u64 = 3_538_984;

    fn head_size(features: u64, classes: u64) -> u64 {
        features * classes + classes
    }

    #[test]
    fn imagenet_heads_reproduce_published_counts() {
        assert_eq!(vgg16(1000).learnable_count(), KERAS_VGG16_TRAINABLE);
        assert_eq!(resnet50(1000).learnable_count(), KERAS_RESNET50_TRAINABLE);
        assert_eq!(resnet50(1000).total_count(), KERAS_RESNET50_TOTAL);
        assert_eq!(inception_v3(1000).learnable_count(), KERAS_INCEPTION_V3_TRAINABLE);
        assert_eq!(inception_v3(1000).total_count(), KERAS_INCEPTION_V3_TOTAL);
        assert_eq!(mobilenet_v2(1000).learnable_count(), KERAS_MOBILENET_V2_TRAINABLE);
        assert_eq!(mobilenet_v2(1000).total_count(), KERAS_MOBILENET_V2_TOTAL);
    }

    #[test]
    fn two_class_heads_swap_only_the_classifier() {
        let cases = [
            (vgg16(2).learnable_count(), KERAS_VGG16_TRAINABLE, 4096),
            (resnet50(2).learnable_count(), KERAS_RESNET50_TRAINABLE, 2048),
            (inception_v3(2).learnable_count(), KERAS_INCEPTION_V3_TRAINABLE, 2048),
            (mobilenet_v2(2).learnable_count(), KERAS_MOBILENET_V2_TRAINABLE, 1280),
        ];
        for (got, imagenet, features) in cases {
            assert_eq!(got, imagenet - head_size(features, 1000) + head_size(features, 2));
        }
    }

    #[test]
    fn output_shapes_are_two_logits() {
        for arch in [vgg16(2), resnet50(2), inception_v3(2), mobilenet_v2(2), reference_cnn((64, 64), 2)] {
            assert_eq!(arch.output_shape(), Shape::vector(2));
        }
    }

    #[test]
    fn reference_cnn_is_small() {
        assert!(reference_cnn((64, 64), 2).learnable_count() <= 500_000);
        assert_eq!(reference_cnn((64, 64), 2).learnable_count(), 23_714);
    }
}
