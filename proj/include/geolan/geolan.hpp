// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "geolan/autodiff.hpp"
#include "geolan/commands.hpp"
#include "geolan/error.hpp"
#include "geolan/geoloss.hpp"
#include "geolan/geometry.hpp"
#include "geolan/gradcheck.hpp"
#include "geolan/io.hpp"
#include "geolan/linalg.hpp"
#include "geolan/metrics.hpp"
#include "geolan/model.hpp"
#include "geolan/plot.hpp"
#include "geolan/rng.hpp"
#include "geolan/special.hpp"
#include "geolan/tensor.hpp"
#include "geolan/trainer.hpp"
#include "geolan/verify.hpp"
