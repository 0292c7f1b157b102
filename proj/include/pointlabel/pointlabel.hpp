#pragma once

#include "pointlabel/container.hpp"
#include "pointlabel/errors.hpp"
#include "pointlabel/inference.hpp"
#include "pointlabel/manifest.hpp"
#include "pointlabel/matrix.hpp"
#include "pointlabel/metrics.hpp"
#include "pointlabel/network.hpp"
#include "pointlabel/pointcloud.hpp"
#include "pointlabel/preprocess.hpp"
#include "pointlabel/raster.hpp"
#include "pointlabel/rng.hpp"
#include "pointlabel/training.hpp"
