// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "femasr/autodiff/gradcheck.hpp"
#include "femasr/autodiff/layers.hpp"
#include "femasr/autodiff/ops.hpp"
#include "femasr/autodiff/tensor.hpp"
#include "femasr/codebook.hpp"
#include "femasr/config.hpp"
#include "femasr/core/binio.hpp"
#include "femasr/core/image.hpp"
#include "femasr/core/rng.hpp"
#include "femasr/dataprep.hpp"
#include "femasr/degrade.hpp"
#include "femasr/losses.hpp"
#include "femasr/metrics.hpp"
#include "femasr/models.hpp"
#include "femasr/synth.hpp"
#include "femasr/train/adam.hpp"
#include "femasr/train/checkpoint.hpp"
#include "femasr/train/state.hpp"
#include "femasr/train/trainer.hpp"
#include "femasr/viz.hpp"
