"""fedforest: federated random forests over horizontally partitioned data"""
