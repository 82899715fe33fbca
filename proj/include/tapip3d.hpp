#pragma once

#include "tapip3d/error.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/tensor.hpp"
#include "tapip3d/nn.hpp"
#include "tapip3d/gradcheck.hpp"
#include "tapip3d/feature_cloud.hpp"
#include "tapip3d/knn_index.hpp"
#include "tapip3d/n2n_attention.hpp"
#include "tapip3d/trajectory.hpp"
#include "tapip3d/refiner.hpp"
#include "tapip3d/model.hpp"
#include "tapip3d/scene.hpp"
#include "tapip3d/synthetic.hpp"
#include "tapip3d/pipeline.hpp"
#include "tapip3d/training.hpp"
#include "tapip3d/metrics.hpp"
#include "tapip3d/gradcheck_suite.hpp"
#include "tapip3d/io.hpp"
